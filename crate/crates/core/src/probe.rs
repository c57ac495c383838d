//! Depth-proxy bias: how far back-projected proxies sit from the true joints.
//!
//! Visible joints see the body surface in front of the joint centre (Type 1);
//! occluded joints see whatever covers them (Type 2).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::observation::ObservationSet;
use crate::scenes::HiddenTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasType {
    Type1,
    Type2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub sample: usize,
    pub joint: usize,
    pub kind: BiasType,
    /// Distance between proxy and true joint (mm).
    pub error: f64,
    /// Proxy depth minus true depth (mm); negative means in front.
    pub depth_offset: f64,
}

/// One record per joint with a proxy.
pub fn probe(obs: &[ObservationSet], truth: &[HiddenTruth]) -> Result<Vec<ProbeRecord>> {
    check_len("ground truth", obs.len(), truth.len())?;
    let mut out = Vec::new();
    for (i, (o, t)) in obs.iter().zip(truth).enumerate() {
        check_len("joints", t.joints.len(), o.proxies.len())?;
        for (j, (p, v)) in o.proxies.iter().zip(&o.visibility).enumerate() {
            let Some(p) = p else { continue };
            out.push(ProbeRecord {
                sample: i,
                joint: j,
                kind: if *v { BiasType::Type1 } else { BiasType::Type2 },
                error: (p - t.joints[j]).norm(),
                depth_offset: p.z - t.joints[j].z,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub type1: Vec<usize>,
    pub type2: Vec<usize>,
}

/// Histogram of proxy errors; the last bin collects everything beyond `max`.
pub fn histogram(records: &[ProbeRecord], bin_width: f64, max: f64) -> Result<Histogram> {
    if !(bin_width > 0.0 && max > 0.0) {
        return Err(Error::Config("histogram bin width and range must be positive".into()));
    }
    let bins = (max / bin_width).ceil() as usize + 1;
    let mut h = Histogram {
        bin_width,
        type1: vec![0; bins],
        type2: vec![0; bins],
    };
    for r in records {
        let b = ((r.error / bin_width) as usize).min(bins - 1);
        match r.kind {
            BiasType::Type1 => h.type1[b] += 1,
            BiasType::Type2 => h.type2[b] += 1,
        }
    }
    Ok(h)
}

pub fn histogram_csv(h: &Histogram, provenance: &str) -> String {
    let mut out = String::new();
    for line in provenance.lines() {
        writeln!(out, "# {line}").unwrap();
    }
    out.push_str("bin_start,bin_end,type1,type2\n");
    let last = h.type1.len() - 1;
    for b in 0..h.type1.len() {
        let start = b as f64 * h.bin_width;
        let end = if b == last { "inf".to_string() } else { (start + h.bin_width).to_string() };
        writeln!(out, "{start},{end},{},{}", h.type1[b], h.type2[b]).unwrap();
    }
    out
}
