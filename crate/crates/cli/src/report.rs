//! `report`: one markdown file assembled from the documented CSVs in a run
//! directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

const REQUIRED: [&str; 3] = ["class_served.csv", "storage.csv", "generation.csv"];

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let headers = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self { headers, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn markdown(&self) -> String {
        let mut s = format!("| {} |\n|{}\n", self.headers.join(" | "), "---|".repeat(self.headers.len()));
        for r in &self.rows {
            let _ = writeln!(s, "| {} |", r.join(" | "));
        }
        s
    }
}

fn short(v: &str) -> String {
    v.parse::<f64>().map_or_else(|_| v.to_string(), |x| format!("{x:.4}"))
}

/// Pivots long rows into `hour × series` using `key` columns for the series name.
fn pivot(t: &Table, filter: impl Fn(&[String]) -> bool, series: &[&str], value: &str) -> Option<String> {
    let hour = t.col("hour")?;
    let val = t.col(value)?;
    let keys: Vec<usize> = series.iter().map(|s| t.col(s)).collect::<Option<_>>()?;
    let mut names: Vec<String> = Vec::new();
    let mut grid: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
    for r in t.rows.iter().filter(|r| filter(r)) {
        let name = keys.iter().map(|&k| r[k].as_str()).collect::<Vec<_>>().join(" ");
        if !names.contains(&name) {
            names.push(name.clone());
        }
        let h: usize = r[hour].parse().ok()?;
        grid.entry(h).or_default().insert(name, short(&r[val]));
    }
    if grid.is_empty() {
        return None;
    }
    let mut s = format!("| hour | {} |\n|---|{}\n", names.join(" | "), "---|".repeat(names.len()));
    for (h, row) in grid {
        let cells: Vec<String> = names.iter().map(|n| row.get(n).cloned().unwrap_or_default()).collect();
        let _ = writeln!(s, "| {h} | {} |", cells.join(" | "));
    }
    Some(s)
}

fn scenario_labels(t: &Table) -> Vec<String> {
    let Some(c) = t.col("scenario") else { return vec![] };
    let mut out: Vec<String> = Vec::new();
    for r in &t.rows {
        if !out.contains(&r[c]) {
            out.push(r[c].clone());
        }
    }
    out.sort_by_key(|l| !l.starts_with("nominal"));
    out
}

/// Builds `report.md`; returns the missing required inputs if any.
pub fn report(dir: &Path) -> Result<Result<(), Vec<String>>> {
    let missing: Vec<String> = REQUIRED
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Ok(Err(missing));
    }
    let class = Table::read(&dir.join("class_served.csv"))?;
    let storage = Table::read(&dir.join("storage.csv"))?;
    let gen = Table::read(&dir.join("generation.csv"))?;
    let optional = |name: &str| -> Result<Option<Table>> {
        let p = dir.join(name);
        if p.is_file() {
            Table::read(&p).map(Some)
        } else {
            Ok(None)
        }
    };

    let mut md = String::from("# EMS run report\n\n");
    md.push_str("Generated from the CSV files in this directory.\n\n");

    md.push_str("## Method comparison\n\n");
    md.push_str(
        "`base` is the EMS plan without resilience coupling, `opt` the DC-LP benchmark \
(scenario-based CVaR plan on a linearized network), `rl` the trained policy acting on the full \
nonlinear power flow. Served values are weighted energy; losses are centered on the expectation.\n\n",
    );
    let mut compared = false;
    for name in ["benchmark_summary.csv", "evaluation_summary.csv"] {
        if let Some(t) = optional(name)? {
            let _ = writeln!(md, "From `{name}`:\n");
            let rounded = Table {
                headers: t.headers.clone(),
                rows: t.rows.iter().map(|r| r.iter().map(|v| short(v)).collect()).collect(),
            };
            md.push_str(&rounded.markdown());
            md.push('\n');
            compared = true;
            break;
        }
    }
    if !compared {
        md.push_str("No summary file found.\n\n");
    }
    if let Some(t) = optional("benchmark_failures.csv")? {
        if !t.rows.is_empty() {
            md.push_str("Failed methods:\n\n");
            md.push_str(&t.markdown());
            md.push('\n');
        }
    }

    let scen_col = class.col("scenario");
    let class_col = class.col("class");
    for label in scenario_labels(&class) {
        let _ = writeln!(md, "## Served load by class, scenario `{label}`\n");
        for c in ["critical", "semi_critical", "non_critical"] {
            let filter = |r: &[String]| {
                scen_col.is_some_and(|i| r[i] == label) && class_col.is_some_and(|i| r[i] == c)
            };
            if let Some(demand) = pivot(&class, filter, &["class"], "demand_mw") {
                let _ = writeln!(md, "### {c}: demand (MW)\n\n{demand}");
            }
            if let Some(served) = pivot(&class, filter, &["method"], "served_mw") {
                let _ = writeln!(md, "### {c}: served (MW)\n\n{served}");
            }
        }
    }

    let scen = storage.col("scenario");
    for label in scenario_labels(&storage) {
        let _ = writeln!(md, "## Storage state of charge, scenario `{label}`\n");
        let filter = |r: &[String]| scen.is_some_and(|i| r[i] == label);
        match pivot(&storage, filter, &["method", "unit"], "soc") {
            Some(t) => md.push_str(&t),
            None => md.push_str("No storage units.\n"),
        }
        md.push('\n');
    }

    let scen = gen.col("scenario");
    for label in scenario_labels(&gen) {
        let _ = writeln!(md, "## Converter output shares, scenario `{label}`\n");
        let filter = |r: &[String]| scen.is_some_and(|i| r[i] == label);
        if let Some(t) = pivot(&gen, filter, &["method", "generator"], "share") {
            md.push_str(&t);
        }
        md.push('\n');
    }

    md.push_str("## Timing\n\n");
    match optional("timing.csv")? {
        Some(t) => {
            md.push_str(
                "Rows tagged `paper-reference` are the published timings on the original \
hardware, included for orientation only.\n\n",
            );
            md.push_str(&t.markdown());
        }
        None => md.push_str("No `timing.csv` found.\n"),
    }
    md.push('\n');

    if let Some(t) = optional("scenarios.csv")? {
        let mass: f64 = t
            .col("probability")
            .map(|c| t.rows.iter().filter_map(|r| r[c].parse::<f64>().ok()).sum())
            .unwrap_or(0.0);
        let _ = writeln!(
            md,
            "## Scenario set\n\n{} retained scenarios, retained probability {:.6}.\n",
            t.rows.len(),
            mass
        );
    }
    if let Some(t) = optional("training_log.csv")? {
        md.push_str("## Training\n\n");
        if let (Some(c), Some(first), Some(last)) = (t.col("mean_reward"), t.rows.first(), t.rows.last()) {
            let _ = writeln!(
                md,
                "{} updates; mean episode reward {} at the first update and {} at the last.\n",
                t.rows.len(),
                short(&first[c]),
                short(&last[c])
            );
        }
    }

    md.push_str("## Files\n\n");
    let mut files: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") || n.ends_with(".json"))
        .collect();
    files.sort();
    for f in files {
        let _ = writeln!(md, "- `{f}`");
    }
    std::fs::write(dir.join("report.md"), md)?;
    Ok(Ok(()))
}
