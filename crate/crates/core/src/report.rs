//! Result tables across the scenario grid and plot-ready column files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::dynamics::{idx, STATE_DIM};
use crate::error::{Error, Result};
use crate::log::{EpisodeLog, RECORD_COLUMNS, RECORD_SCHEMA};
use crate::sim::{Method, MseSummary};

pub const RESULTS_SCHEMA: &str = "knode-mpc-results v1";
pub const TABLE_SCHEMA: &str = "knode-mpc-table v1";
pub const PLOT_SCHEMA: &str = "knode-mpc-plot v1";

const RESULT_COLUMNS: &str =
    "radius_m,speed_m_per_s,method,seed,failed,mse,mse_x,mse_y,mse_z,post_mse,post_mse_x,post_mse_y,post_mse_z";

/// Metrics of one episode over the full run and over the post-change window.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub radius_m: f64,
    pub speed_m_per_s: f64,
    pub method: Method,
    pub seed: u64,
    pub failed: bool,
    pub full: MseSummary,
    pub post: MseSummary,
}

fn mse_fields(s: &mut String, m: &MseSummary) {
    write!(s, ",{:.16e},{:.16e},{:.16e},{:.16e}", m.overall, m.x, m.y, m.z).unwrap();
}

pub fn results_to_csv(results: &[EpisodeResult]) -> String {
    let mut s = String::new();
    writeln!(s, "{RESULTS_SCHEMA}").unwrap();
    writeln!(s, "{RESULT_COLUMNS}").unwrap();
    for r in results {
        write!(
            s,
            "{},{},{},{},{}",
            r.radius_m,
            r.speed_m_per_s,
            r.method.name(),
            r.seed,
            r.failed as u8
        )
        .unwrap();
        mse_fields(&mut s, &r.full);
        mse_fields(&mut s, &r.post);
        s.push('\n');
    }
    s
}

pub fn results_from_csv(text: &str, path: &Path) -> Result<Vec<EpisodeResult>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    if header != RESULTS_SCHEMA {
        return Err(Error::Schema {
            expected: RESULTS_SCHEMA.into(),
            found: header.into(),
        });
    }
    match lines.next() {
        Some((_, cols)) if cols.trim() == RESULT_COLUMNS => {}
        _ => return Err(Error::format(path, "missing or unexpected column header")),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(bad("expected 13 fields"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(&format!("bad number `{}`", f[k])));
        let mse = |k: usize| -> Result<MseSummary> {
            Ok(MseSummary {
                overall: num(k)?,
                x: num(k + 1)?,
                y: num(k + 2)?,
                z: num(k + 3)?,
            })
        };
        out.push(EpisodeResult {
            radius_m: num(0)?,
            speed_m_per_s: num(1)?,
            method: Method::parse(f[2]).ok_or_else(|| bad(&format!("unknown method `{}`", f[2])))?,
            seed: f[3].parse().map_err(|_| bad("bad seed"))?,
            failed: match f[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("bad failure flag")),
            },
            full: mse(5)?,
            post: mse(9)?,
        });
    }
    Ok(out)
}

/// 25th, 50th and 75th percentiles with linear interpolation between order
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        q25: percentile(&v, 0.25),
        median: percentile(&v, 0.5),
        q75: percentile(&v, 0.75),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub radius_m: f64,
    pub speed_m_per_s: f64,
    pub method: Method,
    pub seeds: usize,
    pub failures: usize,
    pub mean: f64,
    pub overall: Quartiles,
    pub x: Quartiles,
    pub y: Quartiles,
    pub z: Quartiles,
    pub post_overall: Quartiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub radii: Vec<f64>,
    pub speeds: Vec<f64>,
    pub methods: Vec<Method>,
    pub cells: Vec<CellStats>,
    /// Configured combinations without any episode.
    pub gaps: Vec<(f64, f64, Method)>,
}

fn sorted_unique(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

impl ResultTable {
    /// Grid spanned by the radii, speeds and methods present in `results`.
    pub fn from_results(results: &[EpisodeResult]) -> Self {
        let radii = sorted_unique(results.iter().map(|r| r.radius_m));
        let speeds = sorted_unique(results.iter().map(|r| r.speed_m_per_s));
        let methods: Vec<Method> = results.iter().map(|r| r.method).collect::<BTreeSet<_>>().into_iter().collect();
        Self::for_grid(results, &radii, &speeds, &methods)
    }

    pub fn for_grid(results: &[EpisodeResult], radii: &[f64], speeds: &[f64], methods: &[Method]) -> Self {
        let mut cells = Vec::new();
        let mut gaps = Vec::new();
        for &r in radii {
            for &v in speeds {
                for &m in methods {
                    let eps: Vec<&EpisodeResult> = results
                        .iter()
                        .filter(|e| e.radius_m == r && e.speed_m_per_s == v && e.method == m)
                        .collect();
                    if eps.is_empty() {
                        gaps.push((r, v, m));
                        continue;
                    }
                    let col = |f: &dyn Fn(&EpisodeResult) -> f64| -> Vec<f64> { eps.iter().map(|e| f(e)).collect() };
                    let overall = col(&|e| e.full.overall);
                    cells.push(CellStats {
                        radius_m: r,
                        speed_m_per_s: v,
                        method: m,
                        seeds: eps.len(),
                        failures: eps.iter().filter(|e| e.failed).count(),
                        mean: overall.iter().sum::<f64>() / overall.len() as f64,
                        overall: quartiles(&overall).unwrap(),
                        x: quartiles(&col(&|e| e.full.x)).unwrap(),
                        y: quartiles(&col(&|e| e.full.y)).unwrap(),
                        z: quartiles(&col(&|e| e.full.z)).unwrap(),
                        post_overall: quartiles(&col(&|e| e.post.overall)).unwrap(),
                    });
                }
            }
        }
        Self {
            radii: radii.to_vec(),
            speeds: speeds.to_vec(),
            methods: methods.to_vec(),
            cells,
            gaps,
        }
    }

    pub fn cell(&self, radius_m: f64, speed_m_per_s: f64, method: Method) -> Option<&CellStats> {
        self.cells
            .iter()
            .find(|c| c.radius_m == radius_m && c.speed_m_per_s == speed_m_per_s && c.method == method)
    }

    /// Method with the lowest median overall MSE in a cell.
    pub fn best_method(&self, radius_m: f64, speed_m_per_s: f64) -> Option<Method> {
        self.cells
            .iter()
            .filter(|c| c.radius_m == radius_m && c.speed_m_per_s == speed_m_per_s)
            .min_by(|a, b| a.overall.median.total_cmp(&b.overall.median))
            .map(|c| c.method)
    }

    /// Mean over the grid of the per-cell mean overall MSE.
    pub fn grid_mean(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.method == method).map(|c| c.mean).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `100·(baseline − ours)/baseline` on grid-mean overall MSE.
    pub fn improvement(&self, ours: Method, baseline: Method) -> Option<f64> {
        let o = self.grid_mean(ours)?;
        let b = self.grid_mean(baseline)?;
        Some(100.0 * (b - o) / b)
    }

    /// Table in the layout of one row per scenario and one column per method;
    /// `*` marks the lowest median in each row.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{TABLE_SCHEMA}").unwrap();
        writeln!(s, "overall tracking MSE [m^2], median across seeds (q25, q75); * = lowest in row").unwrap();
        write!(s, "{:>8} {:>8}", "R [m]", "v [m/s]").unwrap();
        for m in &self.methods {
            write!(s, " {:>36}", m.name()).unwrap();
        }
        s.push('\n');
        for &r in &self.radii {
            for &v in &self.speeds {
                write!(s, "{r:>8} {v:>8}").unwrap();
                let best = self.best_method(r, v);
                for &m in &self.methods {
                    let text = match self.cell(r, v, m) {
                        Some(c) => format!(
                            "{}{:.4e} ({:.3e}, {:.3e}){}",
                            if best == Some(m) { "*" } else { "" },
                            c.overall.median,
                            c.overall.q25,
                            c.overall.q75,
                            if c.failures > 0 { "!" } else { "" }
                        ),
                        None => "gap".to_string(),
                    };
                    write!(s, " {text:>36}").unwrap();
                }
                s.push('\n');
            }
        }
        s.push('\n');
        if self.methods.contains(&Method::KnodeOnline) {
            for &b in self.methods.iter().filter(|&&m| m != Method::KnodeOnline) {
                if let Some(p) = self.improvement(Method::KnodeOnline, b) {
                    writeln!(s, "improvement of knode-online over {}: {p:.2}%", b.name()).unwrap();
                }
            }
        }
        s.push('\n');
        writeln!(s, "per-axis MSE [m^2], median (q25, q75)").unwrap();
        for c in &self.cells {
            let q = |q: &Quartiles| format!("{:.4e} ({:.3e}, {:.3e})", q.median, q.q25, q.q75);
            writeln!(
                s,
                "R={} v={} {:<14} seeds={} x={} y={} z={} post={}",
                c.radius_m,
                c.speed_m_per_s,
                c.method.name(),
                c.seeds,
                q(&c.x),
                q(&c.y),
                q(&c.z),
                q(&c.post_overall)
            )
            .unwrap();
        }
        for (r, v, m) in &self.gaps {
            writeln!(s, "gap: R={r} v={v} {}", m.name()).unwrap();
        }
        s
    }

    /// Machine-readable table, one line per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{TABLE_SCHEMA}").unwrap();
        writeln!(
            s,
            "radius_m,speed_m_per_s,method,seeds,failures,best,mean,median,q25,q75,median_x,median_y,median_z,post_median"
        )
        .unwrap();
        for c in &self.cells {
            let best = self.best_method(c.radius_m, c.speed_m_per_s) == Some(c.method);
            writeln!(
                s,
                "{},{},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                c.radius_m,
                c.speed_m_per_s,
                c.method.name(),
                c.seeds,
                c.failures,
                best as u8,
                c.mean,
                c.overall.median,
                c.overall.q25,
                c.overall.q75,
                c.x.median,
                c.y.median,
                c.z.median,
                c.post_overall.median
            )
            .unwrap();
        }
        s
    }
}

/// Columns `t, ref_x, x, ref_y, y, ref_z, z` for external plotting.
pub fn plot_columns(log: &EpisodeLog) -> String {
    let mut s = String::new();
    writeln!(s, "{PLOT_SCHEMA}").unwrap();
    writeln!(s, "t,ref_x,x,ref_y,y,ref_z,z").unwrap();
    for r in &log.records {
        write!(s, "{:.16e}", r.t).unwrap();
        for k in 0..3 {
            write!(s, ",{:.16e},{:.16e}", r.reference[idx::POS + k], r.state[idx::POS + k]).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Plot columns recovered from a record file written by
/// [`EpisodeLog::to_record_text`].
pub fn plot_columns_from_records(text: &str, path: &Path) -> Result<String> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim();
    if header != RECORD_SCHEMA {
        return Err(Error::Schema {
            expected: RECORD_SCHEMA.into(),
            found: header.into(),
        });
    }
    if lines.next().map(str::trim) != Some(RECORD_COLUMNS.join(",").as_str()) {
        return Err(Error::format(path, "unexpected record columns"));
    }
    let mut s = String::new();
    writeln!(s, "{PLOT_SCHEMA}").unwrap();
    writeln!(s, "t,ref_x,x,ref_y,y,ref_z,z").unwrap();
    let ref_col = 1 + STATE_DIM;
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != RECORD_COLUMNS.len() {
            return Err(Error::format(path, format!("line {}: expected {} fields", n + 3, RECORD_COLUMNS.len())));
        }
        write!(s, "{}", f[0]).unwrap();
        for k in 0..3 {
            write!(s, ",{},{}", f[ref_col + idx::POS + k], f[1 + idx::POS + k]).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}
