use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    /// Mean per-class recall in percent.
    pub value: f64,
    pub recalls: BTreeMap<String, f64>,
    /// Predicted classes with no test instance; left out of the mean.
    pub excluded: Vec<String>,
}

/// Mean over true classes of per-class recall, in percent.
pub fn balanced_accuracy(predictions: &[String], labels: &[String]) -> Result<BalancedAccuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels to score".into()));
    }
    let mut totals: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (p, l) in predictions.iter().zip(labels) {
        let e = totals.entry(l).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
        }
    }
    let excluded: Vec<String> = predictions
        .iter()
        .filter(|p| !totals.contains_key(p.as_str()))
        .map(String::clone)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for c in &excluded {
        log::warn!("class {c} is predicted but has no test instances; excluded from balanced accuracy");
    }
    let recalls: BTreeMap<String, f64> =
        totals.iter().map(|(c, (hit, n))| (c.to_string(), 100.0 * *hit as f64 / *n as f64)).collect();
    let value = recalls.values().sum::<f64>() / recalls.len() as f64;
    Ok(BalancedAccuracy { value, recalls, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TssAccuracy {
    /// Unweighted mean of the per-site balanced accuracies, in percent.
    pub value: f64,
    pub per_site: BTreeMap<String, f64>,
    /// Sites whose test data holds a single class.
    pub single_class_sites: Vec<String>,
}

/// Balanced accuracy within each site, averaged over sites.
pub fn tss_averaged_accuracy(predictions: &[String], labels: &[String], sites: &[String]) -> Result<TssAccuracy> {
    if sites.len() != labels.len() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument("predictions, labels and sites must align".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in sites.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut per_site = BTreeMap::new();
    let mut single = Vec::new();
    for (site, idx) in groups {
        let p: Vec<String> = idx.iter().map(|&i| predictions[i].clone()).collect();
        let l: Vec<String> = idx.iter().map(|&i| labels[i].clone()).collect();
        let ba = balanced_accuracy(&p, &l)?;
        if ba.recalls.len() == 1 {
            single.push(site.to_string());
        }
        per_site.insert(site.to_string(), ba.value);
    }
    if per_site.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let value = per_site.values().sum::<f64>() / per_site.len() as f64;
    Ok(TssAccuracy { value, per_site, single_class_sites: single })
}

/// Mean and standard error `s / sqrt(n)` of one metric over runs, where
/// `s` is the standard deviation of the observed runs (divisor `n`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Absent for a single run.
    pub se: Option<f64>,
    pub n: usize,
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.se {
            Some(se) => write!(f, "{:.2} ± {:.2}", self.mean, se),
            None => write!(f, "{:.2}", self.mean),
        }
    }
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    let n = values.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot aggregate zero runs".into()));
    }
    // Sorting makes the floating-point sums independent of run order.
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / n as f64;
    let se = (n > 1).then(|| {
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        (var / n as f64).sqrt()
    });
    Ok(Aggregate { mean, se, n })
}

/// Probe metrics of one enumerated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub run_id: String,
    pub overall: f64,
    pub per_site: BTreeMap<String, f64>,
    pub tss_avg: f64,
}

impl ProbeResult {
    pub fn score(run_id: impl Into<String>, predictions: &[String], labels: &[String], sites: &[String]) -> Result<Self> {
        let overall = balanced_accuracy(predictions, labels)?.value;
        let tss = tss_averaged_accuracy(predictions, labels, sites)?;
        Ok(Self { run_id: run_id.into(), overall, per_site: tss.per_site, tss_avg: tss.value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub overall: Aggregate,
    pub tss_avg: Aggregate,
}

pub fn aggregate_runs(results: &[ProbeResult]) -> Result<RunAggregate> {
    let overall: Vec<f64> = results.iter().map(|r| r.overall).collect();
    let tss: Vec<f64> = results.iter().map(|r| r.tss_avg).collect();
    Ok(RunAggregate { overall: aggregate(&overall)?, tss_avg: aggregate(&tss)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn two_site_mean() {
        // Site x: recalls 100 and 20 -> 60. Site y: 100 and 60 -> 80.
        let mut p = Vec::new();
        let mut l = Vec::new();
        let mut st = Vec::new();
        for i in 0..5 {
            p.push("a"); l.push("a"); st.push("x");
            p.push(if i == 0 { "b" } else { "a" }); l.push("b"); st.push("x");
            p.push("a"); l.push("a"); st.push("y");
            p.push(if i < 3 { "b" } else { "a" }); l.push("b"); st.push("y");
        }
        let t = tss_averaged_accuracy(&s(&p), &s(&l), &s(&st)).unwrap();
        assert_eq!(t.per_site["x"], 60.0);
        assert_eq!(t.per_site["y"], 80.0);
        assert_eq!(t.value, 70.0);
    }

    #[test]
    fn single_site_equals_overall() {
        let p = s(&["a", "b", "b", "a", "a"]);
        let l = s(&["a", "b", "a", "a", "b"]);
        let sites = s(&["q"; 5]);
        let t = tss_averaged_accuracy(&p, &l, &sites).unwrap();
        assert_eq!(t.value, balanced_accuracy(&p, &l).unwrap().value);
    }

    #[test]
    fn single_class_site_is_flagged() {
        let t = tss_averaged_accuracy(&s(&["a", "b"]), &s(&["a", "a"]), &s(&["x", "x"])).unwrap();
        assert_eq!(t.single_class_sites, vec!["x".to_string()]);
        assert_eq!(t.value, 50.0);
    }

    #[test]
    fn aggregates() {
        let a = aggregate(&[70.0, 80.0]).unwrap();
        assert_eq!(a.mean, 75.0);
        assert!((a.se.unwrap() - 5.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(format!("{a}"), "75.00 ± 3.54");
        assert_eq!(aggregate(&[3.0, 3.0, 3.0]).unwrap().se, Some(0.0));
        assert_eq!(aggregate(&[3.0]).unwrap().se, None);
        assert!(aggregate(&[]).is_err());
    }
}
