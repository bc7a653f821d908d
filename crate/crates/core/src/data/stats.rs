//! Instance counts, per-class counts, area histogram and per-tile density.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::scene::SceneSample;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub samples: usize,
    pub instances: usize,
    pub per_class: BTreeMap<u32, usize>,
    pub bin_width: f64,
    /// `area_hist[k]` counts boxes with area in `[k*bin_width, (k+1)*bin_width)`.
    pub area_hist: Vec<usize>,
    pub per_sample: Vec<(String, usize)>,
}

impl DatasetStats {
    pub fn mean_density(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.instances as f64 / self.samples as f64
        }
    }

    /// Summary rows `metric,value`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        writeln!(s, "samples,{}", self.samples).unwrap();
        writeln!(s, "instances,{}", self.instances).unwrap();
        writeln!(s, "mean_instances_per_sample,{:.6}", self.mean_density()).unwrap();
        let max = self.per_sample.iter().map(|p| p.1).max().unwrap_or(0);
        writeln!(s, "max_instances_per_sample,{max}").unwrap();
        for (c, n) in &self.per_class {
            writeln!(s, "class_{c},{n}").unwrap();
        }
        s
    }

    /// Area-vs-count curve `area_lo,area_hi,count`.
    pub fn area_csv(&self) -> String {
        let mut s = String::from("area_lo,area_hi,count\n");
        for (k, n) in self.area_hist.iter().enumerate() {
            let lo = k as f64 * self.bin_width;
            writeln!(s, "{},{},{}", lo, lo + self.bin_width, n).unwrap();
        }
        s
    }

    /// `id,instances` per sample.
    pub fn density_csv(&self) -> String {
        let mut s = String::from("id,instances\n");
        for (id, n) in &self.per_sample {
            writeln!(s, "{id},{n}").unwrap();
        }
        s
    }
}

pub fn dataset_stats(samples: &[SceneSample], bin_width: f64) -> DatasetStats {
    assert!(bin_width > 0.0, "bin width must be positive");
    let mut st = DatasetStats {
        samples: samples.len(),
        instances: 0,
        per_class: BTreeMap::new(),
        bin_width,
        area_hist: Vec::new(),
        per_sample: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        st.per_sample.push((s.id.clone(), s.annotations.len()));
        for a in &s.annotations {
            st.instances += 1;
            *st.per_class.entry(a.class_id).or_default() += 1;
            let bin = (a.area() / bin_width).floor() as usize;
            if st.area_hist.len() <= bin {
                st.area_hist.resize(bin + 1, 0);
            }
            st.area_hist[bin] += 1;
        }
    }
    st
}
