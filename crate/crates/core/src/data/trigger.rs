use rand::seq::index::sample;

use super::Dataset;
use crate::error::{config, Result};
use crate::{rng, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct TriggerCell<S> {
    /// Flat index into a sample's features.
    pub index: usize,
    pub value: S,
    /// Row and column inside the trigger's own footprint.
    pub local: (usize, usize),
    pub part: usize,
}

/// A backdoor pattern, optionally split into parts for distributed attacks.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSpec<S> {
    pub cells: Vec<TriggerCell<S>>,
    pub target_label: usize,
    pub split_parts: usize,
    footprint: (usize, usize),
}

impl<S: Scalar> TriggerSpec<S> {
    /// `size × size` patch in the bottom-right corner of every channel of a
    /// `C × H × W` sample.
    pub fn patch(sample_shape: &[usize], size: usize, value: S, target_label: usize) -> Result<Self> {
        let [c, h, w] = match sample_shape {
            [c, h, w] => [*c, *h, *w],
            _ => return config(format!("patch trigger needs C×H×W samples, got {sample_shape:?}")),
        };
        if size == 0 || size > h || size > w {
            return config(format!("{size}×{size} trigger does not fit {h}×{w}"));
        }
        let mut cells = Vec::new();
        for ch in 0..c {
            for a in 0..size {
                for b in 0..size {
                    let (row, col) = (h - size + a, w - size + b);
                    cells.push(TriggerCell {
                        index: (ch * h + row) * w + col,
                        value,
                        local: (a, b),
                        part: 0,
                    });
                }
            }
        }
        Ok(Self {
            cells,
            target_label,
            split_parts: 1,
            footprint: (size, size),
        })
    }

    /// Fixed feature indices set to `value` (tabular data).
    pub fn features(indices: &[usize], value: S, target_label: usize) -> Result<Self> {
        if indices.is_empty() {
            return config("trigger needs at least one feature");
        }
        let cells = indices
            .iter()
            .enumerate()
            .map(|(k, &index)| TriggerCell {
                index,
                value,
                local: (0, k),
                part: 0,
            })
            .collect();
        Ok(Self {
            cells,
            target_label,
            split_parts: 1,
            footprint: (1, indices.len()),
        })
    }

    /// Splits the pattern into `parts` disjoint pieces. Four parts on a 2-D
    /// footprint are its quadrants; otherwise cells are dealt in contiguous
    /// runs of their footprint order.
    pub fn split(mut self, parts: usize) -> Result<Self> {
        let (fh, fw) = self.footprint;
        if parts == 0 {
            return config("trigger split needs at least one part");
        }
        if parts == 4 && fh >= 2 && fw >= 2 {
            let (hr, hc) = (fh.div_ceil(2), fw.div_ceil(2));
            for cell in &mut self.cells {
                let (a, b) = cell.local;
                cell.part = usize::from(a >= hr) * 2 + usize::from(b >= hc);
            }
        } else {
            let cells_per_footprint = fh * fw;
            if parts > cells_per_footprint {
                return config(format!(
                    "cannot split {cells_per_footprint} trigger cells into {parts} parts"
                ));
            }
            for cell in &mut self.cells {
                let pos = cell.local.0 * fw + cell.local.1;
                cell.part = pos * parts / cells_per_footprint;
            }
        }
        self.split_parts = parts;
        Ok(self)
    }

    pub fn validate(&self, sample_len: usize, num_classes: usize) -> Result<()> {
        if let Some(c) = self.cells.iter().find(|c| c.index >= sample_len) {
            return config(format!("trigger index {} outside {} features", c.index, sample_len));
        }
        if self.target_label >= num_classes {
            return config(format!(
                "target label {} outside {} classes",
                self.target_label, num_classes
            ));
        }
        Ok(())
    }

    /// Writes part `part` (every cell when `None`) into `sample`.
    pub fn stamp(&self, sample: &mut [S], part: Option<usize>) {
        for c in &self.cells {
            if part.is_none_or(|p| p == c.part) {
                sample[c.index] = c.value;
            }
        }
    }

    pub fn mask(&self, sample_len: usize, part: Option<usize>) -> Vec<bool> {
        let mut m = vec![false; sample_len];
        for c in &self.cells {
            if part.is_none_or(|p| p == c.part) {
                m[c.index] = true;
            }
        }
        m
    }
}

/// Appends stamped, relabelled copies of `round(fraction · n)` randomly chosen
/// samples (at least one). Only pattern part `part_index` is stamped.
pub fn embed_trigger<S: Scalar>(
    dataset: &Dataset<S>,
    spec: &TriggerSpec<S>,
    fraction: f64,
    part_index: usize,
    seed: u64,
) -> Result<Dataset<S>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return config(format!("trigger fraction {fraction} outside (0, 1]"));
    }
    if part_index >= spec.split_parts {
        return config(format!("part {part_index} of a {}-part trigger", spec.split_parts));
    }
    if dataset.is_empty() {
        return Ok(dataset.clone());
    }
    spec.validate(dataset.sample_len(), dataset.num_classes())?;
    let n = dataset.len();
    let count = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut r = rng::rng(seed);
    let mut picked = sample(&mut r, n, count).into_vec();
    picked.sort_unstable();
    let mut copies = dataset.subset(&picked);
    let w = copies.sample_len();
    for row in copies.features_mut().data_mut().chunks_mut(w) {
        spec.stamp(row, Some(part_index));
    }
    let copies = copies.with_labels(vec![spec.target_label; count])?;
    dataset.concat(&copies)
}

/// Test samples not natively of the target class, fully stamped. Labels are
/// kept so callers can still inspect the source class.
pub fn triggered_set<S: Scalar>(test: &Dataset<S>, spec: &TriggerSpec<S>) -> Result<Dataset<S>> {
    spec.validate(test.sample_len(), test.num_classes())?;
    let keep: Vec<usize> = (0..test.len())
        .filter(|&i| test.labels()[i] != spec.target_label)
        .collect();
    let mut out = test.subset(&keep);
    let w = out.sample_len();
    if w > 0 {
        for row in out.features_mut().data_mut().chunks_mut(w) {
            spec.stamp(row, None);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    #[test]
    fn three_of_ten_appends_three() {
        let d = synth_blobs::<f64>(2, 5, 6, 1.0, 0).unwrap();
        let t = TriggerSpec::features(&[0, 1, 2, 3], 1.0, 1).unwrap();
        let out = embed_trigger(&d, &t, 0.3, 0, 7).unwrap();
        assert_eq!(out.len(), 13);
        for i in 10..13 {
            assert_eq!(out.labels()[i], 1);
            assert_eq!(&out.sample(i)[..4], &[1.0; 4]);
        }
        assert_eq!(&out.labels()[..10], d.labels());
    }

    #[test]
    fn target_equal_to_source_keeps_labels() {
        let d = synth_blobs::<f64>(1, 4, 5, 1.0, 0).unwrap();
        let t = TriggerSpec::features(&[4], 9.0, 0).unwrap();
        let out = embed_trigger(&d, &t, 1.0, 0, 1).unwrap();
        assert!(out.labels().iter().all(|&l| l == 0));
        assert!((4..8).all(|i| out.sample(i)[4] == 9.0));
    }

    #[test]
    fn quadrant_split_partitions_patch() {
        let t = TriggerSpec::<f64>::patch(&[1, 8, 8], 3, 1.0, 0)
            .unwrap()
            .split(4)
            .unwrap();
        let masks: Vec<Vec<bool>> = (0..4).map(|p| t.mask(64, Some(p))).collect();
        let full = t.mask(64, None);
        for i in 0..64 {
            let hits = masks.iter().filter(|m| m[i]).count();
            assert_eq!(hits, usize::from(full[i]));
        }
        assert_eq!(full.iter().filter(|&&b| b).count(), 9);
        assert!(masks.iter().all(|m| m.iter().any(|&b| b)));
    }

    #[test]
    fn out_of_bounds_pattern_rejected() {
        let d = synth_blobs::<f64>(2, 2, 3, 1.0, 0).unwrap();
        let t = TriggerSpec::features(&[5], 1.0, 0).unwrap();
        assert!(embed_trigger(&d, &t, 0.5, 0, 0).is_err());
        assert!(TriggerSpec::<f64>::patch(&[1, 2, 2], 3, 1.0, 0).is_err());
    }

    #[test]
    fn triggered_set_drops_target_class() {
        let d = synth_blobs::<f64>(3, 4, 6, 1.0, 0).unwrap();
        let t = TriggerSpec::features(&[0, 1, 2, 3], 1.0, 2).unwrap();
        let s = triggered_set(&d, &t).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.labels().iter().all(|&l| l != 2));
        assert!((0..s.len()).all(|i| s.sample(i)[..4] == [1.0; 4]));
    }
}
