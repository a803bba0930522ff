//! Inference post-processing: presence filtering, mask extraction and
//! overlap-ratio mask suppression, plus result files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{self, GrayImage, LabelMap};
use crate::ndgrad::kernels::{self, Planes};
use crate::shapes::PATCH_SIZE;
use crate::stn::{stitch_transform, BoxParams};

/// Binary instance mask in image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub mask: Vec<bool>,
    pub score: f64,
    /// Row-major index of the source cell.
    pub cell: usize,
    pub bbox: Option<BoxParams>,
}

impl InstanceMask {
    pub fn from_mask(mask: Vec<bool>, score: f64, cell: usize) -> Self {
        Self {
            mask,
            score,
            cell,
            bbox: None,
        }
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Wins a comparison against `other`: higher score, or equal score and
    /// lower cell index.
    fn beats(&self, other: &Self) -> bool {
        self.score > other.score || (self.score == other.score && self.cell < other.cell)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocConfig {
    pub presence_threshold: f32,
    pub mask_threshold: f32,
    pub p_non_max: f32,
    pub nms: NmsMode,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            presence_threshold: 0.1,
            mask_threshold: 0.5,
            p_non_max: 0.1,
            nms: NmsMode::AllComparisons,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmsMode {
    /// Keep a mask only if it wins every comparison it takes part in.
    AllComparisons,
    /// Classic greedy suppression in descending score.
    Greedy,
}

/// Warps each decoded `PATCH_SIZE²` mask whose presence passes the threshold
/// back to image coordinates and binarizes it; empty masks are dropped.
pub fn extract_instances(
    decoded: &[f32],
    boxes: &[BoxParams],
    img_size: (usize, usize),
    presence_threshold: f32,
    mask_threshold: f32,
) -> Result<Vec<InstanceMask>> {
    let plen = PATCH_SIZE * PATCH_SIZE;
    if decoded.len() != boxes.len() * plen {
        return Err(Error::Shape(format!(
            "{} decoded values for {} boxes",
            decoded.len(),
            boxes.len()
        )));
    }
    let (h, w) = img_size;
    let mut out = Vec::new();
    let mut canvas = vec![0.0f32; h * w];
    for (i, bx) in boxes.iter().enumerate() {
        if (bx.presence as f32) < presence_threshold {
            continue;
        }
        let theta = stitch_transform(bx, img_size)?.theta::<f32>();
        let region = kernels::warp_region(&theta, PATCH_SIZE, PATCH_SIZE, h, w);
        canvas.iter_mut().for_each(|v| *v = 0.0);
        let planes = Planes {
            data: &decoded[i * plen..(i + 1) * plen],
            c: 1,
            h: PATCH_SIZE,
            w: PATCH_SIZE,
        };
        kernels::warp_forward(planes, &theta, &mut canvas, h, w, 1.0, region);
        let mask: Vec<bool> = canvas.iter().map(|&v| v > mask_threshold).collect();
        if mask.iter().any(|&m| m) {
            out.push(InstanceMask {
                mask,
                score: bx.presence,
                cell: i,
                bbox: Some(*bx),
            });
        }
    }
    Ok(out)
}

/// `|m ∩ n|` for every ordered pair.
fn intersections(masks: &[InstanceMask]) -> Vec<Vec<usize>> {
    let n = masks.len();
    let mut inter = vec![vec![0usize; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = masks[i].mask.iter().zip(&masks[j].mask).filter(|(a, b)| **a && **b).count();
            inter[i][j] = c;
            inter[j][i] = c;
        }
    }
    inter
}

/// Mask suppression with overlap measured relative to each mask's own area.
/// In [`NmsMode::AllComparisons`] every decision uses the original input set.
/// The output keeps input order.
pub fn nms_masks(masks: &[InstanceMask], p_non_max: f32, mode: NmsMode) -> Vec<InstanceMask> {
    let inter = intersections(masks);
    let areas: Vec<usize> = masks.iter().map(InstanceMask::area).collect();
    let overlaps = |m: usize, n: usize| areas[m] > 0 && inter[m][n] as f64 / areas[m] as f64 > p_non_max as f64;
    let n = masks.len();
    let keep: Vec<bool> = match mode {
        NmsMode::AllComparisons => (0..n)
            .map(|m| (0..n).all(|o| o == m || !overlaps(m, o) || masks[m].beats(&masks[o])))
            .collect(),
        NmsMode::Greedy => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                if masks[a].beats(&masks[b]) {
                    std::cmp::Ordering::Less
                } else if masks[b].beats(&masks[a]) {
                    std::cmp::Ordering::Greater
                } else {
                    a.cmp(&b)
                }
            });
            let mut keep = vec![false; n];
            let mut kept: Vec<usize> = Vec::new();
            for m in order {
                if kept.iter().all(|&k| !overlaps(m, k)) {
                    keep[m] = true;
                    kept.push(m);
                }
            }
            keep
        }
    };
    masks.iter().zip(keep).filter(|(_, k)| *k).map(|(m, _)| m.clone()).collect()
}

/// Label map with ids in descending score order; where masks overlap the
/// higher-scoring one wins.
pub fn instances_to_labels(masks: &[InstanceMask], height: usize, width: usize) -> Result<LabelMap> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| masks[b].score.total_cmp(&masks[a].score).then(masks[a].cell.cmp(&masks[b].cell)));
    let mut labels = LabelMap::new(height, width);
    for (rank, &i) in order.iter().enumerate().rev() {
        if masks[i].mask.len() != height * width {
            return Err(Error::Shape("instance mask does not match label size".into()));
        }
        for (p, &m) in masks[i].mask.iter().enumerate() {
            if m {
                labels.data[p] = rank as u32 + 1;
            }
        }
    }
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: u32,
    pub score: f64,
    pub cell: usize,
    pub bbox: Option<BoxParams>,
}

/// Label-image and score files of one prediction: `<stem>_pred.png`, `<stem>_pred.json`.
pub fn prediction_paths(dir: &Path, stem: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.join(format!("{stem}_pred.png")), dir.join(format!("{stem}_pred.json")))
}

/// Writes the label PNG, score JSON and, with `image`, an overlay PNG.
pub fn write_predictions(dir: &Path, stem: &str, masks: &[InstanceMask], height: usize, width: usize, image: Option<&GrayImage>) -> Result<()> {
    let labels = instances_to_labels(masks, height, width)?;
    let (png, json) = prediction_paths(dir, stem);
    imgproc::write_label_png(&png, &labels)?;
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| masks[b].score.total_cmp(&masks[a].score).then(masks[a].cell.cmp(&masks[b].cell)));
    let records: Vec<InstanceRecord> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| InstanceRecord {
            id: rank as u32 + 1,
            score: masks[i].score,
            cell: masks[i].cell,
            bbox: masks[i].bbox,
        })
        .collect();
    std::fs::write(&json, serde_json::to_string_pretty(&records)?).map_err(|e| Error::io(&json, e))?;
    if let Some(img) = image {
        let path = dir.join(format!("{stem}_overlay.png"));
        imgproc::write_gray_png(&path, &overlay(img, &labels))?;
    }
    Ok(())
}

/// Dimmed image with instance outlines drawn at full intensity.
pub fn overlay(img: &GrayImage, labels: &LabelMap) -> GrayImage {
    let (h, w) = (labels.height, labels.width);
    let mut out = img.clone();
    for v in &mut out.data {
        *v *= 0.6;
    }
    for y in 0..h {
        for x in 0..w {
            let id = labels.get(y, x);
            if id == 0 {
                continue;
            }
            let edge = (y == 0 || labels.get(y - 1, x) != id)
                || (y + 1 == h || labels.get(y + 1, x) != id)
                || (x == 0 || labels.get(y, x - 1) != id)
                || (x + 1 == w || labels.get(y, x + 1) != id);
            if edge {
                out.set(y, x, 1.0);
            }
        }
    }
    out
}

/// Reads a prediction back as instance masks. Scores come from the JSON
/// file when present, otherwise they decrease with the id.
pub fn read_predictions(dir: &Path, stem: &str) -> Result<(Vec<InstanceMask>, LabelMap)> {
    let (png, json) = prediction_paths(dir, stem);
    let labels = imgproc::read_label_png(&png)?;
    let records: Vec<InstanceRecord> = if json.exists() {
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        serde_json::from_str(&text)?
    } else {
        Vec::new()
    };
    let masks = labels
        .ids()
        .into_iter()
        .map(|id| {
            let rec = records.iter().find(|r| r.id == id);
            InstanceMask {
                mask: labels.mask(id),
                score: rec.map_or(1.0 / id as f64, |r| r.score),
                cell: rec.map_or(id as usize, |r| r.cell),
                bbox: rec.and_then(|r| r.bbox),
            }
        })
        .collect();
    Ok((masks, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<bool> {
        (0..h * w).map(|i| (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))).collect()
    }

    fn m(mask: Vec<bool>, score: f64, cell: usize) -> InstanceMask {
        InstanceMask::from_mask(mask, score, cell)
    }

    fn cells(v: &[InstanceMask]) -> Vec<usize> {
        v.iter().map(|m| m.cell).collect()
    }

    #[test]
    fn identical_masks_keep_higher_score() {
        let a = rect(8, 8, 2, 6, 2, 6);
        let out = nms_masks(&[m(a.clone(), 0.8, 0), m(a, 0.9, 1)], 0.1, NmsMode::AllComparisons);
        assert_eq!(cells(&out), vec![1]);
    }

    #[test]
    fn disjoint_masks_both_kept() {
        let out = nms_masks(
            &[m(rect(8, 8, 0, 3, 0, 3), 0.5, 0), m(rect(8, 8, 5, 8, 5, 8), 0.9, 1)],
            0.1,
            NmsMode::AllComparisons,
        );
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn three_way_overlap_keeps_top() {
        let v = [
            m(rect(10, 10, 2, 6, 2, 6), 0.9, 0),
            m(rect(10, 10, 3, 7, 3, 7), 0.8, 1),
            m(rect(10, 10, 4, 8, 4, 8), 0.7, 2),
        ];
        assert_eq!(cells(&nms_masks(&v, 0.1, NmsMode::AllComparisons)), vec![0]);
    }

    #[test]
    fn chain_is_deleted_unlike_greedy() {
        // a overlaps b, b overlaps c, a and c disjoint
        let v = [
            m(rect(4, 12, 0, 4, 0, 5), 0.9, 0),
            m(rect(4, 12, 0, 4, 4, 9), 0.8, 1),
            m(rect(4, 12, 0, 4, 8, 12), 0.7, 2),
        ];
        assert_eq!(cells(&nms_masks(&v, 0.1, NmsMode::AllComparisons)), vec![0]);
        assert_eq!(cells(&nms_masks(&v, 0.1, NmsMode::Greedy)), vec![0, 2]);
    }

    #[test]
    fn overlap_is_measured_per_own_area() {
        // small mask fully inside a large one: the small one sees overlap 1,
        // the large one sees 4/64 < 0.1
        let big = m(rect(8, 8, 0, 8, 0, 8), 0.5, 0);
        let small = m(rect(8, 8, 3, 5, 3, 5), 0.9, 1);
        let out = nms_masks(&[big.clone(), small.clone()], 0.1, NmsMode::AllComparisons);
        assert_eq!(cells(&out), vec![0, 1]);
        let small_low = InstanceMask { score: 0.1, ..small };
        let out = nms_masks(&[big, small_low], 0.1, NmsMode::AllComparisons);
        assert_eq!(cells(&out), vec![0]);
    }

    #[test]
    fn equal_scores_favor_lower_cell() {
        let a = rect(6, 6, 1, 5, 1, 5);
        let out = nms_masks(&[m(a.clone(), 0.5, 7), m(a, 0.5, 3)], 0.1, NmsMode::AllComparisons);
        assert_eq!(cells(&out), vec![3]);
    }

    pub(crate) fn random_masks<R: Rng>(rng: &mut R) -> Vec<InstanceMask> {
        let n = rng.random_range(0..8);
        (0..n)
            .map(|c| {
                let (y, x) = (rng.random_range(0..12), rng.random_range(0..12));
                let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
                // coarse scores make ties likely
                let score = rng.random_range(1..6) as f64 / 6.0;
                m(rect(16, 16, y, y + h, x, x + w), score, c)
            })
            .collect()
    }

    #[test]
    fn idempotent_and_permutation_invariant() {
        let mut rng = stream(0, "nms");
        for _ in 0..1000 {
            let v = random_masks(&mut rng);
            let once = nms_masks(&v, 0.1, NmsMode::AllComparisons);
            assert_eq!(nms_masks(&once, 0.1, NmsMode::AllComparisons), once);
            let mut shuffled = v.clone();
            shuffled.shuffle(&mut rng);
            let mut a = cells(&once);
            let mut b = cells(&nms_masks(&shuffled, 0.1, NmsMode::AllComparisons));
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn low_presence_is_filtered() {
        let decoded = vec![1.0f32; 2 * PATCH_SIZE * PATCH_SIZE];
        let mut b = BoxParams::centered(16.0, 16.0, 16.0, 16.0);
        b.presence = 0.05;
        let out = extract_instances(&decoded, &[b, b], (64, 64), 0.1, 0.5).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn decoded_disk_has_expected_area() {
        let disk = crate::shapes::gen_ellipse_patch(1.0, 0.0, 0.8).unwrap();
        let mut b = BoxParams::centered(40.0, 30.0, 40.0, 40.0);
        b.presence = 0.9;
        let out = extract_instances(&disk.data, &[b], (64, 64), 0.1, 0.5).unwrap();
        assert_eq!(out.len(), 1);
        let r = 0.8 * 40.0 / 2.0;
        let expect = std::f32::consts::PI * r * r;
        let area = out[0].area() as f32;
        assert!((area - expect).abs() / expect < 0.1, "{area} vs {expect}");
        assert_eq!(out[0].score, 0.9);
        // a box hanging over the border is cut at the image edge
        let mut edge = BoxParams::centered(0.0, 0.0, 40.0, 40.0);
        edge.presence = 0.9;
        let out = extract_instances(&disk.data, &[edge], (64, 64), 0.1, 0.5).unwrap();
        assert_eq!(out[0].mask.len(), 64 * 64);
    }

    #[test]
    fn prediction_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = vec![m(rect(8, 8, 0, 3, 0, 3), 0.4, 5), m(rect(8, 8, 4, 8, 4, 8), 0.9, 2)];
        let img = GrayImage::filled(8, 8, 0.5);
        write_predictions(dir.path(), "a", &v, 8, 8, Some(&img)).unwrap();
        let (back, labels) = read_predictions(dir.path(), "a").unwrap();
        assert_eq!(labels.get(5, 5), 1);
        assert_eq!(labels.get(1, 1), 2);
        assert_eq!(back[0].score, 0.9);
        assert_eq!(back[1].mask, v[0].mask);
        assert!(dir.path().join("a_overlay.png").exists());
    }
}
