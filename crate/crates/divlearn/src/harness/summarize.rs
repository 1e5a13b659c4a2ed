//! Grouped summaries of sweep CSVs with a log-log slope fit.

use super::HarnessError;

#[derive(Debug, Clone)]
pub struct GroupSummary {
    pub key: Vec<String>,
    /// Numeric value of the first group key (the slope axis).
    pub axis: f64,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone)]
pub struct SummaryTable {
    pub group_keys: Vec<String>,
    pub response: String,
    pub groups: Vec<GroupSummary>,
    /// OLS fit of log(median response) on log(first group key); absent when
    /// fewer than two positive-axis groups exist.
    pub slope: Option<SlopeFit>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Group a CSV by `group_keys`, summarize `response` per group, and fit the
/// log-log slope against the first group key. Rows whose response is not a
/// finite number (failed pipeline rows) are skipped.
pub fn summarize(
    csv_path: &str,
    group_keys: &[String],
    response: &str,
) -> Result<SummaryTable, HarnessError> {
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| HarnessError::Io(format!("{csv_path}: {e}")))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| HarnessError::Io(format!("{csv_path}: empty file")))?
        .split(',')
        .collect();
    let col = |name: &str| -> Result<usize, HarnessError> {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| HarnessError::MissingColumn(name.to_string()))
    };
    let group_idx: Vec<usize> =
        group_keys.iter().map(|k| col(k)).collect::<Result<_, _>>()?;
    let resp_idx = col(response)?;

    let mut buckets: Vec<(Vec<String>, Vec<f64>)> = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() <= resp_idx {
            continue;
        }
        let value: f64 = match cells[resp_idx].parse() {
            Ok(v) => v,
            Err(_) => continue,
        };
        if !f64::is_finite(value) {
            continue;
        }
        let key: Vec<String> =
            group_idx.iter().map(|&i| cells[i].to_string()).collect();
        match buckets.iter_mut().find(|(k, _)| *k == key) {
            Some((_, vals)) => vals.push(value),
            None => buckets.push((key, vec![value])),
        }
    }
    let mut groups: Vec<GroupSummary> = buckets
        .into_iter()
        .map(|(key, mut vals)| {
            vals.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
            let axis = key[0].parse().unwrap_or(f64::NAN);
            GroupSummary {
                axis,
                count: vals.len(),
                median: quantile(&vals, 0.5),
                q1: quantile(&vals, 0.25),
                q3: quantile(&vals, 0.75),
                key,
            }
        })
        .collect();
    groups.sort_by(|a, b| {
        a.axis
            .partial_cmp(&b.axis)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.key.cmp(&b.key))
    });

    let pts: Vec<(f64, f64)> = groups
        .iter()
        .filter(|g| g.axis > 0.0 && g.median > 0.0)
        .map(|g| (g.axis.ln(), g.median.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx <= 0.0 {
            None
        } else {
            let slope = sxy / sxx;
            let rss: f64 = pts
                .iter()
                .map(|p| {
                    let fit = my + slope * (p.0 - mx);
                    (p.1 - fit) * (p.1 - fit)
                })
                .sum();
            let stderr = if pts.len() > 2 {
                (rss / (k - 2.0) / sxx).sqrt()
            } else {
                0.0
            };
            Some(SlopeFit { slope, stderr })
        }
    } else {
        None
    };
    Ok(SummaryTable {
        group_keys: group_keys.to_vec(),
        response: response.to_string(),
        groups,
        slope,
    })
}

impl SummaryTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{} | count median q1 q3 ({})\n",
            self.group_keys.join(","),
            self.response
        ));
        for g in &self.groups {
            out.push_str(&format!(
                "{} | {} {:.6e} {:.6e} {:.6e}\n",
                g.key.join(","),
                g.count,
                g.median,
                g.q1,
                g.q3
            ));
        }
        match &self.slope {
            Some(fit) => out.push_str(&format!(
                "log-log slope of median {} vs {}: {:.6} +/- {:.6}\n",
                self.response, self.group_keys[0], fit.slope, fit.stderr
            )),
            None => out.push_str("log-log slope: not defined for these groups\n"),
        }
        out
    }
}
