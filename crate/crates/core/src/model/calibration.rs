use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::forward::{Observer, Site, Trace};
use super::weights::Model;

/// Observed activation range of every site, tied to one model by digest.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub model_digest: String,
    /// Percentile used to clip ranges, if any.
    pub clip_percentile: Option<f64>,
    pub ranges: BTreeMap<Site, (f32, f32)>,
}

impl Calibration {
    pub fn range(&self, site: Site) -> Result<(f32, f32)> {
        self.ranges
            .get(&site)
            .copied()
            .ok_or_else(|| Error::Uncalibrated(format!("no range recorded for {site:?}")))
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.model_digest != model.digest() {
            return Err(Error::Uncalibrated("calibration was recorded on a different model".into()));
        }
        Ok(())
    }
}

#[derive(Default)]
struct MinMax {
    ranges: BTreeMap<Site, (f32, f32)>,
}

impl Observer for MinMax {
    fn observe(&mut self, site: Site, values: &[f32]) {
        let e = self.ranges.entry(site).or_insert((f32::INFINITY, f32::NEG_INFINITY));
        for &v in values {
            e.0 = e.0.min(v);
            e.1 = e.1.max(v);
        }
    }
}

#[derive(Default)]
struct Collect {
    values: BTreeMap<Site, Vec<f32>>,
}

impl Observer for Collect {
    fn observe(&mut self, site: Site, values: &[f32]) {
        self.values.entry(site).or_default().extend_from_slice(values);
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f32], p: f64) -> f32 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Run the float model over `sequences` and record every activation range.
///
/// With `clip_percentile = Some(p)`, each range is `[P(100 - p), P(p)]`
/// instead of the raw min/max.
pub fn calibrate(model: &Model, sequences: &[Vec<u32>], clip_percentile: Option<f64>) -> Result<Calibration> {
    if sequences.is_empty() {
        return Err(Error::Empty("calibration needs at least one sequence"));
    }
    if let Some(p) = clip_percentile {
        if !(50.0..=100.0).contains(&p) {
            return Err(Error::Invalid(format!("clip percentile {p} outside [50, 100]")));
        }
    }
    let ranges = match clip_percentile {
        None => {
            let mut mm = MinMax::default();
            for seq in sequences {
                let mut trace = Trace {
                    observer: Some(&mut mm),
                    ..Default::default()
                };
                model.forward_traced(seq, None, &mut trace)?;
            }
            mm.ranges
        }
        Some(p) => {
            let mut c = Collect::default();
            for seq in sequences {
                let mut trace = Trace {
                    observer: Some(&mut c),
                    ..Default::default()
                };
                model.forward_traced(seq, None, &mut trace)?;
            }
            c.values
                .into_iter()
                .map(|(site, mut v)| {
                    v.sort_by(f32::total_cmp);
                    (site, (percentile(&v, 100.0 - p), percentile(&v, p)))
                })
                .collect()
        }
    };
    Ok(Calibration {
        model_digest: model.digest(),
        clip_percentile,
        ranges,
    })
}
