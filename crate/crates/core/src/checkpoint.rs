//! Text checkpoints of an ensemble snapshot.
//!
//! ```text
//! knode-mpc-checkpoint v1
//! capacity 3
//! layer_dims 17 32 32 13
//! version 5
//! nominal <mass> <inertia, 9 values row-major> <gravity, 3> <thrust factor> <moment caps, 3>
//! members 2
//! member 1 2061
//! <2061 parameters>
//! member 0 2061
//! <2061 parameters>
//! end
//! ```
//!
//! Members are listed oldest first with their age. Reals use 17 significant
//! digits, which reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::dynamics::QuadParams;
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::mlp::Mlp;

pub const CHECKPOINT_SCHEMA: &str = "knode-mpc-checkpoint v1";

fn real(s: &mut String, v: f64) {
    write!(s, " {v:.16e}").unwrap();
}

pub fn checkpoint_to_string(model: &EnsembleModel) -> String {
    let mut s = String::new();
    writeln!(s, "{CHECKPOINT_SCHEMA}").unwrap();
    writeln!(s, "capacity {}", model.capacity()).unwrap();
    let dims: Vec<String> = model.layer_dims().iter().map(usize::to_string).collect();
    writeln!(s, "layer_dims {}", dims.join(" ")).unwrap();
    writeln!(s, "version {}", model.version()).unwrap();
    let p = model.nominal();
    s.push_str("nominal");
    real(&mut s, p.mass());
    for r in 0..3 {
        for c in 0..3 {
            real(&mut s, p.inertia()[(r, c)]);
        }
    }
    p.gravity().iter().for_each(|&g| real(&mut s, g));
    real(&mut s, p.thrust_max_factor());
    p.moment_max().iter().for_each(|&m| real(&mut s, m));
    s.push('\n');
    writeln!(s, "members {}", model.len()).unwrap();
    for (net, age) in model.members().zip(model.ages()) {
        writeln!(s, "member {age} {}", net.num_params()).unwrap();
        let mut line = String::with_capacity(net.num_params() * 25);
        for (k, v) in net.params().iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            write!(line, "{v:.16e}").unwrap();
        }
        writeln!(s, "{line}").unwrap();
    }
    writeln!(s, "end").unwrap();
    s
}

pub fn save_checkpoint(model: &EnsembleModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EnsembleModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text, path)
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, line: usize, msg: impl std::fmt::Display) -> Error {
        Error::format(self.path, format!("line {}: {msg}", line + 1))
    }

    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .ok_or_else(|| Error::format(self.path, format!("unexpected end of file, expected {what}")))
    }

    /// A line `key v1 v2 …`; returns the values.
    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, line) = self.next_line(key)?;
        let mut it = line.split_ascii_whitespace();
        if it.next() != Some(key) {
            return Err(self.err(n, format!("expected `{key}`")));
        }
        Ok((n, it.collect()))
    }

    fn parse<T: std::str::FromStr>(&self, n: usize, tok: &str) -> Result<T> {
        tok.parse().map_err(|_| self.err(n, format!("cannot parse `{tok}`")))
    }

    fn single<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (n, vals) = self.keyed(key)?;
        if vals.len() != 1 {
            return Err(self.err(n, format!("`{key}` takes one value")));
        }
        self.parse(n, vals[0])
    }
}

pub fn checkpoint_from_str(text: &str, path: &Path) -> Result<EnsembleModel> {
    let mut r = Reader {
        lines: text.lines().enumerate(),
        path,
    };
    let (_, header) = r.next_line("schema header")?;
    if header.trim() != CHECKPOINT_SCHEMA {
        return Err(Error::Schema {
            expected: CHECKPOINT_SCHEMA.into(),
            found: header.trim().into(),
        });
    }
    let capacity: usize = r.single("capacity")?;
    let (n, dims) = r.keyed("layer_dims")?;
    let dims: Vec<usize> = dims.iter().map(|t| r.parse(n, t)).collect::<Result<_>>()?;
    let version: u64 = r.single("version")?;

    let (n, nom) = r.keyed("nominal")?;
    if nom.len() != 17 {
        return Err(r.err(n, format!("`nominal` takes 17 values, found {}", nom.len())));
    }
    let nom: Vec<f64> = nom.iter().map(|t| r.parse(n, t)).collect::<Result<_>>()?;
    let nominal = QuadParams::new(nom[0], Matrix3::from_row_slice(&nom[1..10]), Vector3::new(nom[10], nom[11], nom[12]))
        .and_then(|p| p.with_control_limits(nom[13], Vector3::new(nom[14], nom[15], nom[16])))
        .map_err(|e| r.err(n, e))?;

    let count: usize = r.single("members")?;
    if count > capacity {
        return Err(Error::format(path, format!("{count} members exceed capacity {capacity}")));
    }
    let mut members = Vec::with_capacity(count);
    for k in 0..count {
        let (n, head) = r.keyed("member")?;
        if head.len() != 2 {
            return Err(r.err(n, "`member` takes age and parameter count"));
        }
        let age: usize = r.parse(n, head[0])?;
        let n_params: usize = r.parse(n, head[1])?;
        if age != count - 1 - k {
            return Err(r.err(n, format!("member ages must run {}..0 oldest first", count - 1)));
        }
        let (n, line) = r.next_line("member parameters")?;
        let params: Vec<f64> = line.split_ascii_whitespace().map(|t| r.parse(n, t)).collect::<Result<_>>()?;
        if params.len() != n_params {
            return Err(Error::Dimension {
                context: format!("{} line {}", path.display(), n + 1),
                expected: n_params,
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(r.err(n, "non-finite parameter"));
        }
        members.push(Mlp::from_params(&dims, params).map_err(|e| r.err(n, e))?);
    }
    let (n, end) = r.next_line("`end`")?;
    if end.trim() != "end" {
        return Err(r.err(n, "expected `end`"));
    }
    if let Some((n, extra)) = r.lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(r.err(n, format!("trailing content `{extra}`")));
    }
    EnsembleModel::from_parts(nominal, capacity, &dims, members, version).map_err(|e| Error::format(path, e.to_string()))
}
