//! Run CSVs and the `report` transformation into per-figure series.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hcci_nmpc::bridge::Distribution;
use hcci_nmpc::config::{ExperimentConfig, SNAPSHOT_NAME};
use hcci_nmpc::sim::CycleRecord;

pub const CYCLES_CSV: &str = "cycles.csv";
pub const SOLVE_TIMES_CSV: &str = "solve_times.csv";
pub const PLANT_CSV: &str = "plant.csv";

const STATE_COLUMNS: [&str; 8] = ["c0", "c1", "c2", "c3", "h0", "h1", "h2", "h3"];

/// Per-cycle closed-loop log. Wall-clock times go to a separate file so this
/// one is reproducible bit for bit.
pub fn write_cycles(records: &[CycleRecord], path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    let mut header = vec![
        "cycle", "r_imep", "r_ca50", "imep", "ca50", "nox", "mprr", "pred_imep", "pred_ca50", "pred_nox", "pred_mprr", "doi_fuel",
        "doi_water", "nvo",
    ];
    header.extend(STATE_COLUMNS);
    header.extend([
        "status",
        "qp_iterations",
        "kkt",
        "final_slack",
        "clamp",
        "cost",
        "predicted_violation",
        "rollout_violation",
    ]);
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![r.cycle.to_string(), r.r_imep.to_string(), r.r_ca50.to_string()];
        row.extend(r.measured.to_array().map(|v| v.to_string()));
        row.extend(r.predicted.to_array().map(|v| v.to_string()));
        row.extend(r.applied.to_array().map(|v| v.to_string()));
        row.extend(r.state.to_array().map(|v| v.to_string()));
        row.push(r.status.code().to_string());
        row.push(r.qp_iterations.to_string());
        row.extend([r.kkt, r.final_slack, r.clamp, r.cost, r.predicted_violation, r.rollout_violation].map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_solve_times(records: &[CycleRecord], path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["cycle", "solve_ms"])?;
    for r in records {
        out.write_record([r.cycle.to_string(), r.solve_ms.map(|t| t.to_string()).unwrap_or_default()])?;
    }
    out.flush()?;
    Ok(())
}

struct Table {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let headers = r.headers()?.iter().map(str::to_string).collect();
        let rows = r.records().collect::<Result<_, _>>().with_context(|| format!("reading {}", path.display()))?;
        Ok(Self { headers, rows })
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("column `{name}` missing"))
    }

    fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let i = self.index(name)?;
        Ok(self.rows.iter().map(|r| r.get(i).and_then(|v| v.parse().ok())).collect())
    }

    fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    /// Writes `columns` as `(source, renamed)` pairs.
    fn select(&self, columns: &[(&str, &str)], path: &Path) -> Result<()> {
        let idx = columns.iter().map(|(c, _)| self.index(c)).collect::<Result<Vec<_>>>()?;
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(columns.iter().map(|(_, n)| *n))?;
        for r in &self.rows {
            out.write_record(idx.iter().map(|&i| r.get(i).unwrap_or("")))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn same(names: &[&'static str]) -> Vec<(&'static str, &'static str)> {
    names.iter().map(|n| (*n, *n)).collect()
}

fn rmse(a: &[Option<f64>], b: &[Option<f64>], skip: usize) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).skip(skip).filter_map(|(x, y)| Some(x.as_ref()? - y.as_ref()?)).collect();
    (d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64).sqrt()
}

fn describe(name: &str, samples: &[Option<f64>]) -> String {
    let s: Vec<f64> = samples.iter().flatten().copied().collect();
    match Distribution::from_samples(&s) {
        Some(d) => format!(
            "{name}: n {} mean {:.3} p50 {:.3} p99 {:.3} max {:.3} ms\n",
            d.count, d.mean, d.p50, d.p99, d.max
        ),
        None => format!("{name}: no samples\n"),
    }
}

/// Converts a closed-loop or plant-node run directory into plot-ready series
/// under `<dir>/report`. Returns the files written.
pub fn report(dir: &Path) -> Result<Vec<PathBuf>> {
    let (main, closed_loop) = if dir.join(CYCLES_CSV).exists() {
        (dir.join(CYCLES_CSV), true)
    } else if dir.join(PLANT_CSV).exists() {
        (dir.join(PLANT_CSV), false)
    } else {
        bail!(
            "{} has neither {CYCLES_CSV} nor {PLANT_CSV}; point `report` at the output of `hcci closed-loop` or `hcci plant-node`",
            dir.display()
        );
    };
    let warmup = match dir.join(SNAPSHOT_NAME) {
        p if p.exists() => ExperimentConfig::load(&p).map_err(|e| anyhow::anyhow!("{e}"))?.run.warmup,
        _ => hcci_nmpc::config::RunConfig::default().warmup,
    };
    let t = Table::read(&main)?;
    let out = dir.join("report");
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, cols: &[(&str, &str)], table: &Table| -> Result<()> {
        let p = out.join(name);
        table.select(cols, &p)?;
        written.push(p);
        Ok(())
    };

    emit("tracking.csv", &same(&["cycle", "r_imep", "imep", "r_ca50", "ca50", "nox", "mprr"]), &t)?;
    emit("actuations.csv", &same(&["cycle", "doi_fuel", "doi_water", "nvo"]), &t)?;
    if closed_loop {
        let mut cols = vec![("cycle", "cycle")];
        cols.extend(STATE_COLUMNS.iter().map(|c| (*c, *c)));
        emit("lstm_states.csv", &cols, &t)?;
    }

    let (solve_ms, round_trip) = if closed_loop {
        let times = dir.join(SOLVE_TIMES_CSV);
        if !times.exists() {
            bail!("{} missing; re-run `hcci closed-loop` to regenerate it", times.display());
        }
        let tt = Table::read(&times)?;
        emit("timing.csv", &same(&["cycle", "solve_ms"]), &tt)?;
        (tt.column("solve_ms")?, None)
    } else {
        let mut tt = Table::read(&main)?;
        let us = tt.index("solve_time_us")?;
        for r in tt.rows.iter_mut() {
            let ms = r.get(us).and_then(|v| v.parse::<f64>().ok()).map(|v| (v / 1e3).to_string());
            let mut fields: Vec<String> = r.iter().map(str::to_string).collect();
            fields[us] = ms.unwrap_or_default();
            *r = csv::StringRecord::from(fields);
        }
        emit(
            "timing.csv",
            &[("cycle", "cycle"), ("solve_time_us", "solve_ms"), ("round_trip_ms", "round_trip_ms"), ("missed", "missed")],
            &tt,
        )?;
        (tt.column("solve_time_us")?, Some(tt.column("round_trip_ms")?))
    };

    let mut s = format!(
        "cycles {} (warm-up {warmup})\nIMEP RMSE {:.4} bar\nCA50 RMSE {:.4} CAD\n",
        t.rows.len(),
        rmse(&t.column("imep")?, &t.column("r_imep")?, warmup),
        rmse(&t.column("ca50")?, &t.column("r_ca50")?, warmup)
    );
    for c in ["nox", "mprr"] {
        let max = t.column(c)?.into_iter().flatten().fold(f64::NEG_INFINITY, f64::max);
        s += &format!("max {c} {max:.3}\n");
    }
    if t.has("missed") {
        let missed = t.column("missed")?.into_iter().flatten().filter(|v| *v != 0.0).count();
        s += &format!("missed cycles {missed}\n");
    }
    s += &describe("solve time", &solve_ms);
    if let Some(rt) = round_trip {
        s += &describe("round trip", &rt);
    }
    let p = out.join("summary.txt");
    fs::write(&p, &s)?;
    written.push(p);
    Ok(written)
}
