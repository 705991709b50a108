//! Versioned plain-text model files with a SHA-256 trailer.
//!
//! ```text
//! tkl-model 1
//! task classification
//! ...
//! p 3 3
//! <row>
//! ...
//! checksum sha256 <hex digest of every preceding byte>
//! ```
//!
//! Floats are written with 17 significant digits, so a save/load round trip
//! reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::basis::{DomainBox, TkBasis, ORDERING_TAG};
use crate::data::Scaler;
use crate::dual::Task;
use crate::error::{Result, TklError};
use crate::kernel::KernelParams;
use crate::train::{PhaseTimings, TkModel, TraceRecord, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "tkl-model";

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_row(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_f).collect::<Vec<_>>().join(" ")
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Serializes `model` to the text format, checksum line included.
pub fn model_to_string(model: &TkModel) -> String {
    let cfg = &model.config;
    let mut s = String::new();
    let mut line = |l: String| {
        s.push_str(&l);
        s.push('\n');
    };
    line(format!("{MAGIC} {FORMAT_VERSION}"));
    line(format!("task {}", cfg.task));
    line(format!("ordering {ORDERING_TAG}"));
    line(format!("n {}", model.n()));
    line(format!("d {}", cfg.d));
    line(format!("c {}", fmt_f(cfg.c)));
    line(format!("eps {}", fmt_f(cfg.eps_tube)));
    line(format!("delta {}", fmt_f(cfg.delta)));
    line(format!("gap_tol {}", fmt_f(cfg.gap_tol)));
    line(format!("max_outer_iters {}", cfg.max_outer_iters));
    line(format!("smo_tol {}", fmt_f(cfg.smo_tol)));
    line(format!("smo_max_iter {}", cfg.smo_max_iter));
    line(format!("line_search_grid {}", fmt_row(cfg.line_search_grid.iter().copied())));
    line(format!("line_search_refine {}", cfg.line_search_refine));
    line(format!("seed {}", cfg.seed));
    line(format!("converged {}", model.converged));
    line(format!("bias {}", fmt_f(model.bias)));
    match model.label_values {
        Some([lo, hi]) => line(format!("labels {} {}", fmt_f(lo), fmt_f(hi))),
        None => line("labels none".into()),
    }
    line(format!("domain_a {}", fmt_row(model.params.domain.a().iter().copied())));
    line(format!("domain_b {}", fmt_row(model.params.domain.b().iter().copied())));
    line(format!("scaler_min {}", fmt_row(model.scaler.mins.iter().copied())));
    line(format!("scaler_max {}", fmt_row(model.scaler.maxs.iter().copied())));
    let p = model.params.p();
    line(format!("p {} {}", p.nrows(), p.ncols()));
    for row in p.rows() {
        line(fmt_row(row.iter().copied()));
    }
    line(format!("support {} {}", model.support_x.nrows(), model.support_x.ncols()));
    for (row, a) in model.support_x.rows().into_iter().zip(&model.alpha_tilde) {
        line(format!("{} {}", fmt_f(*a), fmt_row(row.iter().copied())));
    }
    line(format!("trace {}", model.trace.len()));
    for r in &model.trace {
        let step = r.step.map(fmt_f).unwrap_or_else(|| "none".into());
        line(format!(
            "{} {} {} {} {} {} {}",
            r.iteration,
            fmt_f(r.opt_a),
            fmt_f(r.opt_p),
            fmt_f(r.gap),
            step,
            fmt_f(r.trace_p),
            fmt_f(r.min_eig_p)
        ));
    }
    let digest = hex_digest(s.as_bytes());
    s.push_str(&format!("checksum sha256 {digest}\n"));
    s
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes `<path>.partial` and renames it into place, so a crash never
/// leaves a truncated model under the final name.
pub fn save_model(model: &TkModel, path: &Path) -> Result<()> {
    let tmp = partial_path(path);
    fs::write(&tmp, model_to_string(model))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TkModel> {
    let text = fs::read_to_string(path)?;
    model_from_str(&text)
}

/// Parses a model file. The version is checked before the checksum, so a
/// file from a newer format reports a version mismatch.
pub fn model_from_str(text: &str) -> Result<TkModel> {
    let first = text.lines().next().unwrap_or("");
    let mut head = first.split_whitespace();
    if head.next() != Some(MAGIC) {
        return Err(TklError::ModelFormat { line: 1, msg: format!("expected '{MAGIC} <version>'") });
    }
    let version: u32 = head
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TklError::ModelFormat { line: 1, msg: "missing format version".into() })?;
    if version != FORMAT_VERSION {
        return Err(TklError::VersionMismatch { found: version, supported: FORMAT_VERSION });
    }

    let body_end = text
        .trim_end_matches('\n')
        .rfind('\n')
        .map(|i| i + 1)
        .ok_or(TklError::ChecksumMismatch)?;
    let (body, trailer) = text.split_at(body_end);
    let expected = trailer
        .trim_end()
        .strip_prefix("checksum sha256 ")
        .ok_or(TklError::ChecksumMismatch)?;
    if expected != hex_digest(body.as_bytes()) {
        return Err(TklError::ChecksumMismatch);
    }
    Parser::new(body).parse()
}

struct Parser<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(body: &'a str) -> Self {
        Parser { lines: body.lines().collect(), pos: 1 }
    }

    fn err(&self, msg: impl Into<String>) -> TklError {
        TklError::ModelFormat { line: self.pos, msg: msg.into() }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        let l = self.lines.get(self.pos).copied().ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += 1;
        Ok(l)
    }

    /// Reads a `key value...` line and returns the value tokens.
    fn field(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let l = self.next_line()?;
        let mut it = l.split_whitespace();
        match it.next() {
            Some(k) if k == key => Ok(it.collect()),
            Some(k) => {
                self.pos -= 1;
                Err(self.err(format!("unknown field '{k}' for format version {FORMAT_VERSION}, expected '{key}'")))
            }
            None => Err(self.err(format!("expected '{key}'"))),
        }
    }

    fn single(&mut self, key: &str) -> Result<&'a str> {
        let v = self.field(key)?;
        match v.as_slice() {
            [one] => Ok(one),
            _ => Err(self.err(format!("'{key}' takes one value"))),
        }
    }

    fn parse_tok<T: std::str::FromStr>(&self, tok: &str) -> Result<T> {
        tok.parse().map_err(|_| self.err(format!("invalid value '{tok}'")))
    }

    fn f64s(&self, toks: &[&str]) -> Result<Vec<f64>> {
        toks.iter().map(|t| self.parse_tok(t)).collect()
    }

    fn scalar<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let tok = self.single(key)?;
        self.parse_tok(tok)
    }

    fn vector(&mut self, key: &str, len: usize) -> Result<Vec<f64>> {
        let toks = self.field(key)?;
        if toks.len() != len {
            return Err(self.err(format!("'{key}' needs {len} values, got {}", toks.len())));
        }
        self.f64s(&toks)
    }

    fn dims(&mut self, key: &str) -> Result<(usize, usize)> {
        let toks = self.field(key)?;
        match toks.as_slice() {
            [r, c] => Ok((self.parse_tok(r)?, self.parse_tok(c)?)),
            _ => Err(self.err(format!("'{key}' needs two dimensions"))),
        }
    }

    fn row(&mut self, len: usize) -> Result<Vec<f64>> {
        let l = self.next_line()?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != len {
            self.pos -= 1;
            return Err(self.err(format!("expected {len} values, got {}", toks.len())));
        }
        self.f64s(&toks)
    }

    fn parse(mut self) -> Result<TkModel> {
        let task: Task = self.single("task")?.parse().map_err(|e: TklError| self.err(e.to_string()))?;
        let ordering = self.single("ordering")?;
        if ordering != ORDERING_TAG {
            return Err(self.err(format!("unsupported monomial ordering '{ordering}'")));
        }
        let n: usize = self.scalar("n")?;
        let d: usize = self.scalar("d")?;
        if n == 0 || d > 6 {
            return Err(self.err(format!("unsupported dimensions n = {n}, d = {d}")));
        }
        let mut config = TrainConfig::new(task);
        config.d = d;
        config.c = self.scalar("c")?;
        config.eps_tube = self.scalar("eps")?;
        config.delta = self.scalar("delta")?;
        config.gap_tol = self.scalar("gap_tol")?;
        config.max_outer_iters = self.scalar("max_outer_iters")?;
        config.smo_tol = self.scalar("smo_tol")?;
        config.smo_max_iter = self.scalar("smo_max_iter")?;
        let grid = self.field("line_search_grid")?;
        config.line_search_grid = self.f64s(&grid)?;
        config.line_search_refine = self.scalar("line_search_refine")?;
        config.seed = self.scalar("seed")?;
        let converged: bool = self.scalar("converged")?;
        let bias: f64 = self.scalar("bias")?;
        let labels = self.field("labels")?;
        let label_values = match labels.as_slice() {
            ["none"] => None,
            [lo, hi] => Some([self.parse_tok(lo)?, self.parse_tok(hi)?]),
            _ => return Err(self.err("'labels' takes 'none' or two values")),
        };
        let a = self.vector("domain_a", n)?;
        let b = self.vector("domain_b", n)?;
        let domain = DomainBox::new(a, b).map_err(|e| self.err(e.to_string()))?;
        let mins = self.vector("scaler_min", n)?;
        let maxs = self.vector("scaler_max", n)?;
        let scaler = Scaler { mins, maxs };

        let basis = TkBasis::new(n, d);
        let qp = basis.qp();
        let (pr, pc) = self.dims("p")?;
        if (pr, pc) != (qp, qp) {
            return Err(self.err(format!("P must be {qp}x{qp} for n = {n}, d = {d}")));
        }
        let mut p = Vec::with_capacity(qp * qp);
        for _ in 0..qp {
            p.extend(self.row(qp)?);
        }
        let p = Array2::from_shape_vec((qp, qp), p).expect("square");
        let params = KernelParams::new(basis, domain, p).map_err(|e| self.err(e.to_string()))?;

        let (sm, sn) = self.dims("support")?;
        if sn != n {
            return Err(self.err(format!("support points need {n} columns")));
        }
        let mut alpha_tilde = Vec::with_capacity(sm);
        let mut sx = Vec::with_capacity(sm * n);
        for _ in 0..sm {
            let row = self.row(n + 1)?;
            alpha_tilde.push(row[0]);
            sx.extend_from_slice(&row[1..]);
        }
        let support_x = Array2::from_shape_vec((sm, n), sx).expect("support shape");

        let count: usize = self.scalar("trace")?;
        let mut trace = Vec::with_capacity(count);
        for _ in 0..count {
            let l = self.next_line()?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 7 {
                self.pos -= 1;
                return Err(self.err("trace records have 7 values"));
            }
            let step = if toks[4] == "none" { None } else { Some(self.parse_tok(toks[4])?) };
            trace.push(TraceRecord {
                iteration: self.parse_tok(toks[0])?,
                opt_a: self.parse_tok(toks[1])?,
                opt_p: self.parse_tok(toks[2])?,
                gap: self.parse_tok(toks[3])?,
                step,
                trace_p: self.parse_tok(toks[5])?,
                min_eig_p: self.parse_tok(toks[6])?,
            });
        }
        if trace.is_empty() {
            return Err(self.err("model has no trace records"));
        }
        if self.pos < self.lines.len() {
            let extra = self.lines[self.pos].split_whitespace().next().unwrap_or("");
            return Err(self.err(format!("unknown field '{extra}' for format version {FORMAT_VERSION}")));
        }
        Ok(TkModel {
            params,
            alpha_tilde,
            support_x,
            bias,
            scaler,
            label_values,
            config,
            trace,
            converged,
            timings: PhaseTimings::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::train::train;

    fn small_model() -> TkModel {
        let ds = synth::two_moons(24, 0.1, 3).unwrap();
        let mut cfg = TrainConfig::new(Task::Classification);
        cfg.max_outer_iters = 2;
        train(&ds, &cfg).unwrap()
    }

    fn reseal(body: &str) -> String {
        format!("{body}checksum sha256 {}\n", hex_digest(body.as_bytes()))
    }

    fn body_of(text: &str) -> &str {
        let end = text.trim_end_matches('\n').rfind('\n').unwrap() + 1;
        &text[..end]
    }

    #[test]
    fn round_trip_is_exact() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tkl");
        save_model(&model, &path).unwrap();
        assert!(!partial_path(&path).exists());
        let back = load_model(&path).unwrap();
        assert_eq!(back, TkModel { timings: PhaseTimings::default(), ..model.clone() });
        let q = model.support_x.clone();
        assert_eq!(
            model.decision_scaled(q.view()).unwrap(),
            back.decision_scaled(q.view()).unwrap()
        );
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let text = model_to_string(&small_model());
        let pos = text.find("bias ").unwrap() + 6;
        let mut bytes = text.into_bytes();
        bytes[pos] = if bytes[pos] == b'1' { b'2' } else { b'1' };
        let tampered = String::from_utf8(bytes).unwrap();
        assert!(matches!(model_from_str(&tampered), Err(TklError::ChecksumMismatch)));
    }

    #[test]
    fn newer_version_reports_version_first() {
        let text = model_to_string(&small_model()).replacen("tkl-model 1", "tkl-model 2", 1);
        assert!(matches!(
            model_from_str(&text),
            Err(TklError::VersionMismatch { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = model_to_string(&small_model());
        let body = body_of(&text).replacen("ordering grlex\n", "ordering grlex\nkernel_cache 4\n", 1);
        let err = model_from_str(&reseal(&body)).unwrap_err();
        assert!(err.to_string().contains("unknown field 'kernel_cache'"), "{err}");
    }

    #[test]
    fn missing_checksum_line() {
        let text = model_to_string(&small_model());
        assert!(matches!(model_from_str(body_of(&text)), Err(TklError::ChecksumMismatch)));
    }

    #[test]
    fn garbage_header() {
        assert!(matches!(model_from_str("hello\n"), Err(TklError::ModelFormat { line: 1, .. })));
    }
}
