//! Flat numeric serialization used by golden tests and checkpoints.
//!
//! Everything is line-oriented text. Each object starts with a header line
//! `fame-flat 1 <kind>`, followed by a dimension line and then rows of
//! whitespace-separated numbers. Floats print in Rust's shortest
//! round-trip form, so write/parse is lossless and byte-deterministic.
//!
//! Layouts:
//! - `mdp`: dims `S A`; then S*A transition rows of length S, one reward
//!   row (S*A), one line `gamma`, one start-distribution row (S), one
//!   terminal row (S entries of 0/1).
//! - `qtable`: dims `S A`; one line `tau`; S rows of length A.
//! - `categorical`: dims `S A`; S probability rows.
//! - `gaussian`: dims `C D`; C mean rows then C std rows.
//! - `meta`: line `kind tasks_integrated tau eps`, the learner object,
//!   one cumulative state-weight row, one cumulative state-action row
//!   (possibly empty).
//! - `buffer`: line `n_tasks`, then per task `task <id> <n>` followed by n
//!   record lines: `d <state> <action>` or `c <cell> [components...]`.
//! - `checkpoint`: line `task_index`, then tagged optional sections.

use std::fmt::Write as _;
use std::path::Path;

use crate::buffers::{MetaBuffer, MetaRecord};
use crate::error::{FameError, Result};
use crate::fast::QTable;
use crate::mdp::TabularMdp;
use crate::meta::{MetaLearner, MetaState};
use crate::policy::{CategoricalPolicyTable, GaussianPolicyTable};

fn fmt_row(out: &mut String, nums: &[f64]) {
    for (i, x) in nums.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{x:?}");
    }
    out.push('\n');
}

struct Cursor<'a> {
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Self { lines: text.lines(), line_no: 0 }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        loop {
            self.line_no += 1;
            match self.lines.next() {
                Some(l) if l.trim().is_empty() => continue,
                Some(l) => return Ok(l.trim()),
                None => {
                    return Err(FameError::FlatLayout(format!(
                        "unexpected end of input at line {}",
                        self.line_no
                    )))
                }
            }
        }
    }

    fn expect_header(&mut self, kind: &str) -> Result<()> {
        let line = self.next_line()?;
        let expected = format!("fame-flat 1 {kind}");
        if line != expected {
            return Err(FameError::FlatLayout(format!(
                "expected header '{expected}', found '{line}'"
            )));
        }
        Ok(())
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let line = self.next_line()?;
            for tok in line.split_whitespace() {
                out.push(tok.parse::<f64>().map_err(|_| {
                    FameError::FlatLayout(format!("bad float '{tok}' at line {}", self.line_no))
                })?);
            }
        }
        if out.len() != n {
            return Err(FameError::FlatLayout(format!(
                "expected {n} numbers, found {}",
                out.len()
            )));
        }
        Ok(out)
    }

    fn usizes(&mut self, n: usize) -> Result<Vec<usize>> {
        let line = self.next_line()?;
        let vals: Vec<usize> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>().map_err(|_| {
                    FameError::FlatLayout(format!("bad count '{tok}' at line {}", self.line_no))
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != n {
            return Err(FameError::FlatLayout(format!(
                "expected {n} counts on line {}, found {}",
                self.line_no,
                vals.len()
            )));
        }
        Ok(vals)
    }
}

pub fn mdp_to_flat(mdp: &TabularMdp) -> String {
    let mut out = String::new();
    out.push_str("fame-flat 1 mdp\n");
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let _ = writeln!(out, "{ns} {na}");
    for s in 0..ns {
        for a in 0..na {
            fmt_row(&mut out, mdp.transition_row(s, a));
        }
    }
    fmt_row(&mut out, mdp.reward_flat());
    fmt_row(&mut out, &[mdp.gamma()]);
    fmt_row(&mut out, mdp.start_dist());
    let term: Vec<f64> = mdp.terminal_flags().iter().map(|t| if *t { 1.0 } else { 0.0 }).collect();
    fmt_row(&mut out, &term);
    out
}

pub fn mdp_from_flat(text: &str) -> Result<TabularMdp> {
    let mut cur = Cursor::new(text);
    cur.expect_header("mdp")?;
    read_mdp(&mut cur)
}

fn read_mdp(cur: &mut Cursor<'_>) -> Result<TabularMdp> {
    let dims = cur.usizes(2)?;
    let (ns, na) = (dims[0], dims[1]);
    let transition = cur.floats(ns * na * ns)?;
    let reward = cur.floats(ns * na)?;
    let gamma = cur.floats(1)?[0];
    let start = cur.floats(ns)?;
    let term = cur.floats(ns)?;
    TabularMdp::new(ns, na, transition, reward, gamma, start, term.iter().map(|t| *t != 0.0).collect())
}

pub fn qtable_to_flat(q: &QTable) -> String {
    let mut out = String::new();
    out.push_str("fame-flat 1 qtable\n");
    let _ = writeln!(out, "{} {}", q.n_states(), q.n_actions());
    fmt_row(&mut out, &[q.tau()]);
    for s in 0..q.n_states() {
        fmt_row(&mut out, q.row(s));
    }
    out
}

pub fn qtable_from_flat(text: &str) -> Result<QTable> {
    let mut cur = Cursor::new(text);
    cur.expect_header("qtable")?;
    read_qtable(&mut cur)
}

fn read_qtable(cur: &mut Cursor<'_>) -> Result<QTable> {
    let dims = cur.usizes(2)?;
    let tau = cur.floats(1)?[0];
    let values = cur.floats(dims[0] * dims[1])?;
    Ok(QTable::from_values(dims[0], dims[1], values, tau))
}

pub fn categorical_to_flat(pi: &CategoricalPolicyTable) -> String {
    let mut out = String::new();
    out.push_str("fame-flat 1 categorical\n");
    let _ = writeln!(out, "{} {}", pi.n_states(), pi.n_actions());
    for s in 0..pi.n_states() {
        fmt_row(&mut out, pi.row(s));
    }
    out
}

pub fn categorical_from_flat(text: &str) -> Result<CategoricalPolicyTable> {
    let mut cur = Cursor::new(text);
    cur.expect_header("categorical")?;
    read_categorical(&mut cur)
}

fn read_categorical(cur: &mut Cursor<'_>) -> Result<CategoricalPolicyTable> {
    let dims = cur.usizes(2)?;
    let probs = cur.floats(dims[0] * dims[1])?;
    CategoricalPolicyTable::new(dims[0], dims[1], probs)
}

pub fn gaussian_to_flat(g: &GaussianPolicyTable) -> String {
    let mut out = String::new();
    out.push_str("fame-flat 1 gaussian\n");
    let _ = writeln!(out, "{} {}", g.n_cells(), g.action_dim());
    for c in 0..g.n_cells() {
        fmt_row(&mut out, g.mean(c));
    }
    for c in 0..g.n_cells() {
        fmt_row(&mut out, g.std(c));
    }
    out
}

pub fn gaussian_from_flat(text: &str) -> Result<GaussianPolicyTable> {
    let mut cur = Cursor::new(text);
    cur.expect_header("gaussian")?;
    read_gaussian(&mut cur)
}

fn read_gaussian(cur: &mut Cursor<'_>) -> Result<GaussianPolicyTable> {
    let dims = cur.usizes(2)?;
    let (nc, dim) = (dims[0], dims[1]);
    let mut mean = Vec::with_capacity(nc * dim);
    for _ in 0..nc {
        mean.extend(cur.floats(dim)?);
    }
    let mut std = Vec::with_capacity(nc * dim);
    for _ in 0..nc {
        std.extend(cur.floats(dim)?);
    }
    GaussianPolicyTable::from_parts(nc, dim, mean, std)
}

pub fn buffer_to_flat(buffer: &MetaBuffer) -> String {
    let mut out = String::new();
    out.push_str("fame-flat 1 buffer\n");
    let _ = writeln!(out, "{}", buffer.n_tasks());
    for task_id in 0..buffer.n_tasks() {
        let records = buffer.task_records(task_id);
        let _ = writeln!(out, "task {task_id} {}", records.len());
        for rec in records {
            match rec {
                MetaRecord::Discrete { state, action } => {
                    let _ = writeln!(out, "d {state} {action}");
                }
                MetaRecord::Continuous { cell, action } => {
                    let _ = write!(out, "c {cell}");
                    if let Some(a) = action {
                        for x in a {
                            let _ = write!(out, " {x:?}");
                        }
                    }
                    out.push('\n');
                }
            }
        }
    }
    out
}

pub fn buffer_from_flat(text: &str) -> Result<MetaBuffer> {
    let mut cur = Cursor::new(text);
    cur.expect_header("buffer")?;
    read_buffer(&mut cur)
}

fn read_buffer(cur: &mut Cursor<'_>) -> Result<MetaBuffer> {
    let n_tasks = cur.usizes(1)?[0];
    let mut buffer = MetaBuffer::new();
    for _ in 0..n_tasks {
        let header = cur.next_line()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "task" {
            return Err(FameError::FlatLayout(format!("bad task header '{header}'")));
        }
        let task_id: usize = parts[1]
            .parse()
            .map_err(|_| FameError::FlatLayout("bad task id".into()))?;
        let n: usize = parts[2]
            .parse()
            .map_err(|_| FameError::FlatLayout("bad record count".into()))?;
        for i in 0..n {
            let line = cur.next_line()?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let rec = match toks.first() {
                Some(&"d") if toks.len() == 3 => MetaRecord::Discrete {
                    state: toks[1].parse().map_err(|_| FameError::FlatLayout("bad state".into()))?,
                    action: toks[2]
                        .parse()
                        .map_err(|_| FameError::FlatLayout("bad action".into()))?,
                },
                Some(&"c") if toks.len() >= 2 => {
                    let cell =
                        toks[1].parse().map_err(|_| FameError::FlatLayout("bad cell".into()))?;
                    let comps: Vec<f64> = toks[2..]
                        .iter()
                        .map(|t| {
                            t.parse::<f64>()
                                .map_err(|_| FameError::FlatLayout("bad component".into()))
                        })
                        .collect::<Result<_>>()?;
                    MetaRecord::Continuous {
                        cell,
                        action: if comps.is_empty() { None } else { Some(comps) },
                    }
                }
                _ => return Err(FameError::FlatLayout(format!("bad record line '{line}'"))),
            };
            // records re-enter through the tail window by construction
            buffer.record(rec, n - i, n, n, task_id)?;
        }
    }
    Ok(buffer)
}

pub fn meta_to_flat(meta: &MetaState) -> String {
    let (learner, cum_state, cum_sa, tasks, tau, eps) = meta.parts();
    let mut out = String::new();
    out.push_str("fame-flat 1 meta\n");
    let kind = match learner {
        MetaLearner::Q(_) => "q",
        MetaLearner::Categorical(_) => "categorical",
        MetaLearner::Gaussian(_) => "gaussian",
    };
    let _ = writeln!(out, "{kind} {tasks} {tau:?} {eps:?}");
    match learner {
        MetaLearner::Q(q) => out.push_str(&qtable_to_flat(q)),
        MetaLearner::Categorical(c) => out.push_str(&categorical_to_flat(c)),
        MetaLearner::Gaussian(g) => out.push_str(&gaussian_to_flat(g)),
    }
    fmt_row(&mut out, cum_state);
    let _ = writeln!(out, "{}", cum_sa.len());
    if !cum_sa.is_empty() {
        fmt_row(&mut out, cum_sa);
    }
    out
}

pub fn meta_from_flat(text: &str) -> Result<MetaState> {
    let mut cur = Cursor::new(text);
    cur.expect_header("meta")?;
    read_meta(&mut cur)
}

fn read_meta(cur: &mut Cursor<'_>) -> Result<MetaState> {
    let line = cur.next_line()?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(FameError::FlatLayout(format!("bad meta header '{line}'")));
    }
    let tasks: usize = parts[1].parse().map_err(|_| FameError::FlatLayout("bad count".into()))?;
    let tau: f64 = parts[2].parse().map_err(|_| FameError::FlatLayout("bad tau".into()))?;
    let eps: f64 = parts[3].parse().map_err(|_| FameError::FlatLayout("bad eps".into()))?;
    let (learner, n_states) = match parts[0] {
        "q" => {
            cur.expect_header("qtable")?;
            let q = read_qtable(cur)?;
            let n = q.n_states();
            (MetaLearner::Q(q), n)
        }
        "categorical" => {
            cur.expect_header("categorical")?;
            let c = read_categorical(cur)?;
            let n = c.n_states();
            (MetaLearner::Categorical(c), n)
        }
        "gaussian" => {
            cur.expect_header("gaussian")?;
            let g = read_gaussian(cur)?;
            let n = g.n_cells();
            (MetaLearner::Gaussian(g), n)
        }
        other => return Err(FameError::FlatLayout(format!("unknown meta kind '{other}'"))),
    };
    let cum_state = cur.floats(n_states)?;
    let sa_len = cur.usizes(1)?[0];
    let cum_sa = if sa_len > 0 { cur.floats(sa_len)? } else { Vec::new() };
    Ok(MetaState::restore(learner, cum_state, cum_sa, tasks, tau, eps))
}

/// Everything needed to resume a sequence after a task boundary. Random
/// streams re-derive from (seed, task), so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Tasks completed so far.
    pub tasks_done: usize,
    pub fast_q: Option<QTable>,
    pub fast_gaussian: Option<GaussianPolicyTable>,
    pub meta: Option<MetaState>,
    pub buffer: MetaBuffer,
}

impl Checkpoint {
    pub fn to_flat(&self) -> String {
        let mut out = String::new();
        out.push_str("fame-flat 1 checkpoint\n");
        let _ = writeln!(out, "{}", self.tasks_done);
        if let Some(q) = &self.fast_q {
            out.push_str("section fast_q\n");
            out.push_str(&qtable_to_flat(q));
        }
        if let Some(g) = &self.fast_gaussian {
            out.push_str("section fast_gaussian\n");
            out.push_str(&gaussian_to_flat(g));
        }
        if let Some(m) = &self.meta {
            out.push_str("section meta\n");
            out.push_str(&meta_to_flat(m));
        }
        out.push_str("section buffer\n");
        out.push_str(&buffer_to_flat(&self.buffer));
        out.push_str("end\n");
        out
    }

    pub fn from_flat(text: &str) -> Result<Self> {
        let mut cur = Cursor::new(text);
        cur.expect_header("checkpoint")?;
        let tasks_done = cur.usizes(1)?[0];
        let mut ck = Checkpoint {
            tasks_done,
            fast_q: None,
            fast_gaussian: None,
            meta: None,
            buffer: MetaBuffer::new(),
        };
        loop {
            let line = cur.next_line()?;
            if line == "end" {
                break;
            }
            let name = line.strip_prefix("section ").ok_or_else(|| {
                FameError::FlatLayout(format!("expected a section marker, found '{line}'"))
            })?;
            match name {
                "fast_q" => {
                    cur.expect_header("qtable")?;
                    ck.fast_q = Some(read_qtable(&mut cur)?);
                }
                "fast_gaussian" => {
                    cur.expect_header("gaussian")?;
                    ck.fast_gaussian = Some(read_gaussian(&mut cur)?);
                }
                "meta" => {
                    cur.expect_header("meta")?;
                    ck.meta = Some(read_meta(&mut cur)?);
                }
                "buffer" => {
                    cur.expect_header("buffer")?;
                    ck.buffer = read_buffer(&mut cur)?;
                }
                other => {
                    return Err(FameError::FlatLayout(format!("unknown section '{other}'")))
                }
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_flat())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_flat(&text)
    }
}

/// Writes via a temp file plus rename so partially written results never
/// appear under the final name.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
