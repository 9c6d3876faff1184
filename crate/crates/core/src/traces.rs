//! Trace description language for user tasks, plus the benchmark generators.
//!
//! A trace file is UTF-8 text with one step per line:
//!
//! ```text
//! # comment
//! task parent:
//! syscall join-init 100 -> $r0
//! syscall rcsv-spwn @child $r0 100
//! syscall join-wait $r0
//! syscall join-free $r0
//! syscall rcsv-exit 0
//! task child:
//! compute 16000
//! syscall join-exit $r0
//! ```
//!
//! Arguments are integer literals, register references `$r<idx>` or trace
//! references `@<label>`. A `-> $r<idx>` suffix captures the syscall's return
//! value. Repeating a `task <label>:` header appends another program to the
//! same label; spawned instances of that label run the programs round-robin.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp, Poisson};
use thiserror::Error;

pub const NUM_REGS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}: unknown syscall `{name}`")]
    UnknownSyscall { line: usize, name: String },
    #[error("line {line}: `{name}` takes {expected} argument(s), got {got}")]
    Arity {
        line: usize,
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("trace `{0}` does not end with rcsv-exit or join-exit")]
    MissingTerminator(String),
    #[error("trace `{0}` has no steps")]
    Empty(String),
    #[error("unknown trace label `@{0}`")]
    UnknownLabel(String),
    #[error("expected a single trace, found {0}")]
    NotSingle(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Arg {
    Imm(u32),
    Reg(u8),
    Trace(String),
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Imm(v) => write!(f, "{v}"),
            Arg::Reg(r) => write!(f, "$r{r}"),
            Arg::Trace(l) => write!(f, "@{l}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyscallKind {
    RcsvSpwn,
    RcsvExit,
    JoinInit,
    JoinFree,
    JoinWait,
    JoinExit,
}

impl SyscallKind {
    pub const ALL: [SyscallKind; 6] = [
        SyscallKind::RcsvSpwn,
        SyscallKind::RcsvExit,
        SyscallKind::JoinInit,
        SyscallKind::JoinFree,
        SyscallKind::JoinWait,
        SyscallKind::JoinExit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyscallKind::RcsvSpwn => "rcsv-spwn",
            SyscallKind::RcsvExit => "rcsv-exit",
            SyscallKind::JoinInit => "join-init",
            SyscallKind::JoinFree => "join-free",
            SyscallKind::JoinWait => "join-wait",
            SyscallKind::JoinExit => "join-exit",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            SyscallKind::RcsvSpwn => 3,
            _ => 1,
        }
    }

    /// Terminating calls end the task; the issuing PE is freed at once.
    pub fn terminates(self) -> bool {
        matches!(self, SyscallKind::RcsvExit | SyscallKind::JoinExit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TraceStep {
    Compute(u64),
    /// Memory access; executed as compute time.
    Mem(u64),
    Syscall {
        kind: SyscallKind,
        args: Vec<Arg>,
        ret: Option<u8>,
    },
}

impl TraceStep {
    pub fn busy_ticks(&self) -> u64 {
        match self {
            TraceStep::Compute(t) | TraceStep::Mem(t) => *t,
            TraceStep::Syscall { .. } => 0,
        }
    }
}

impl fmt::Display for TraceStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceStep::Compute(t) => write!(f, "compute {t}"),
            TraceStep::Mem(t) => write!(f, "mem {t}"),
            TraceStep::Syscall { kind, args, ret } => {
                write!(f, "syscall {}", kind.name())?;
                for a in args {
                    write!(f, " {a}")?;
                }
                if let Some(r) = ret {
                    write!(f, " -> $r{r}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceProgram {
    pub name: String,
    pub steps: Vec<TraceStep>,
}

impl TraceProgram {
    pub fn new(name: impl Into<String>, steps: Vec<TraceStep>) -> Result<Self, TraceError> {
        let p = TraceProgram {
            name: name.into(),
            steps,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), TraceError> {
        match self.steps.last() {
            None => Err(TraceError::Empty(self.name.clone())),
            Some(TraceStep::Syscall { kind, .. }) if kind.terminates() => Ok(()),
            Some(_) => Err(TraceError::MissingTerminator(self.name.clone())),
        }
    }

    /// Serial execution time: the sum of compute and memory steps.
    pub fn busy_ticks(&self) -> u64 {
        self.steps.iter().map(TraceStep::busy_ticks).sum()
    }

    pub fn trace_refs(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().flat_map(|s| match s {
            TraceStep::Syscall { args, .. } => args
                .iter()
                .filter_map(|a| match a {
                    Arg::Trace(l) => Some(l.as_str()),
                    _ => None,
                })
                .collect::<Vec<_>>(),
            _ => Vec::new(),
        })
    }
}

impl fmt::Display for TraceProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task {}:", self.name)?;
        for s in &self.steps {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

/// Programs addressed by label; the index of a label doubles as its `imem`
/// address.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceLibrary {
    labels: Vec<String>,
    families: Vec<Vec<TraceProgram>>,
    by_label: BTreeMap<String, u32>,
}

impl TraceLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, program: TraceProgram) -> u32 {
        if let Some(&id) = self.by_label.get(&program.name) {
            self.families[id as usize].push(program);
            return id;
        }
        let id = self.labels.len() as u32;
        self.by_label.insert(program.name.clone(), id);
        self.labels.push(program.name.clone());
        self.families.push(vec![program]);
        id
    }

    pub fn imem_of(&self, label: &str) -> Option<u32> {
        self.by_label.get(label).copied()
    }

    /// Program run by the `ordinal`-th instance spawned from `imem`.
    pub fn program(&self, imem: u32, ordinal: u32) -> Option<&TraceProgram> {
        let fam = self.families.get(imem as usize)?;
        fam.get(ordinal as usize % fam.len())
    }

    pub fn family(&self, imem: u32) -> &[TraceProgram] {
        &self.families[imem as usize]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Every `@label` used by any program must be defined.
    pub fn check_refs(&self) -> Result<(), TraceError> {
        for fam in &self.families {
            for p in fam {
                for l in p.trace_refs() {
                    if !self.by_label.contains_key(l) {
                        return Err(TraceError::UnknownLabel(l.to_string()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Append every program of `other`, returning the imem remap.
    pub fn merge(&mut self, other: &TraceLibrary) {
        for fam in &other.families {
            for p in fam {
                self.add(p.clone());
            }
        }
    }
}

impl fmt::Display for TraceLibrary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for fam in &self.families {
            for p in fam {
                write!(f, "{p}")?;
            }
        }
        Ok(())
    }
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

fn parse_reg(tok: &str, line: usize, col: usize) -> Result<u8, TraceError> {
    let idx = tok
        .strip_prefix("$r")
        .and_then(|d| d.parse::<u8>().ok())
        .ok_or_else(|| syntax(line, col, format!("bad register `{tok}`")))?;
    if idx as usize >= NUM_REGS {
        return Err(syntax(line, col, format!("register `{tok}` out of range")));
    }
    Ok(idx)
}

fn parse_ticks(tok: Option<(usize, &str)>, line: usize, eol: usize) -> Result<u64, TraceError> {
    let (col, tok) = tok.ok_or_else(|| syntax(line, eol, "missing tick count"))?;
    tok.parse::<u64>()
        .map_err(|_| syntax(line, col, format!("expected a non-negative tick count, got `{tok}`")))
}

/// Tokens of one line with their 1-based columns.
fn tokens(s: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in s.char_indices() {
        if c.is_whitespace() {
            if let Some(st) = start.take() {
                out.push((st + 1, &s[st..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(st) = start {
        out.push((st + 1, &s[st..]));
    }
    out
}

fn parse_step(toks: &[(usize, &str)], line: usize, eol: usize) -> Result<TraceStep, TraceError> {
    let (col, head) = toks[0];
    match head {
        "compute" | "mem" => {
            if toks.len() > 2 {
                return Err(syntax(line, toks[2].0, "unexpected token"));
            }
            let t = parse_ticks(toks.get(1).copied(), line, eol)?;
            Ok(if head == "compute" {
                TraceStep::Compute(t)
            } else {
                TraceStep::Mem(t)
            })
        }
        "syscall" => {
            let (ncol, name) = *toks
                .get(1)
                .ok_or_else(|| syntax(line, eol, "missing syscall name"))?;
            let kind = SyscallKind::from_name(name).ok_or_else(|| TraceError::UnknownSyscall {
                line,
                name: name.to_string(),
            })?;
            let _ = ncol;
            let mut args = Vec::new();
            let mut ret = None;
            let mut i = 2;
            while i < toks.len() {
                let (c, t) = toks[i];
                if t == "->" {
                    let (rc, rt) = *toks
                        .get(i + 1)
                        .ok_or_else(|| syntax(line, eol, "missing capture register"))?;
                    ret = Some(parse_reg(rt, line, rc)?);
                    if let Some((xc, _)) = toks.get(i + 2) {
                        return Err(syntax(line, *xc, "unexpected token after capture"));
                    }
                    break;
                }
                let a = if let Some(label) = t.strip_prefix('@') {
                    if label.is_empty() {
                        return Err(syntax(line, c, "empty trace label"));
                    }
                    Arg::Trace(label.to_string())
                } else if t.starts_with('$') {
                    Arg::Reg(parse_reg(t, line, c)?)
                } else {
                    let v = if let Some(hex) = t.strip_prefix("0x") {
                        u32::from_str_radix(hex, 16)
                    } else {
                        t.parse::<u32>()
                    };
                    Arg::Imm(v.map_err(|_| syntax(line, c, format!("bad argument `{t}`")))?)
                };
                args.push(a);
                i += 1;
            }
            if args.len() != kind.arity() {
                return Err(TraceError::Arity {
                    line,
                    name: kind.name().to_string(),
                    expected: kind.arity(),
                    got: args.len(),
                });
            }
            Ok(TraceStep::Syscall { kind, args, ret })
        }
        other => Err(syntax(line, col, format!("unknown step `{other}`"))),
    }
}

/// Parse a trace file containing one or more `task` sections. Steps before
/// the first header belong to a trace named `main`.
pub fn parse_library(text: &str) -> Result<TraceLibrary, TraceError> {
    let mut lib = TraceLibrary::new();
    let mut cur: Option<(String, Vec<TraceStep>)> = None;
    let finish = |cur: &mut Option<(String, Vec<TraceStep>)>,
                      lib: &mut TraceLibrary|
     -> Result<(), TraceError> {
        if let Some((name, steps)) = cur.take() {
            lib.add(TraceProgram::new(name, steps)?);
        }
        Ok(())
    };
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let body = raw.split('#').next().unwrap_or("");
        let toks = tokens(body);
        if toks.is_empty() {
            continue;
        }
        if toks[0].1 == "task" {
            let (c, lab) = *toks
                .get(1)
                .ok_or_else(|| syntax(line, body.len() + 1, "missing task label"))?;
            let label = lab
                .strip_suffix(':')
                .filter(|l| !l.is_empty())
                .ok_or_else(|| syntax(line, c, "task header must be `task <label>:`"))?;
            if toks.len() > 2 {
                return Err(syntax(line, toks[2].0, "unexpected token after task header"));
            }
            finish(&mut cur, &mut lib)?;
            cur = Some((label.to_string(), Vec::new()));
            continue;
        }
        let step = parse_step(&toks, line, body.trim_end().len() + 1)?;
        cur.get_or_insert_with(|| ("main".to_string(), Vec::new()))
            .1
            .push(step);
    }
    finish(&mut cur, &mut lib)?;
    Ok(lib)
}

/// Parse text holding exactly one trace.
pub fn parse_trace(text: &str) -> Result<TraceProgram, TraceError> {
    let lib = parse_library(text)?;
    let total: usize = (0..lib.len() as u32).map(|i| lib.family(i).len()).sum();
    if total != 1 {
        return Err(TraceError::NotSingle(total));
    }
    Ok(lib.family(0)[0].clone())
}

// ---------------------------------------------------------------------------
// Benchmarks

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkKind {
    Independent,
    Interference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LengthDist {
    Fixed,
    /// Uniform integer in `[ceil(lo_frac * max), max]`.
    Uniform { lo_frac: f64 },
}

/// How inter-arrival gaps of the periodic stimulus are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalDist {
    /// Poisson-distributed integer gap with the given mean.
    Poisson,
    /// Exponential gap (a Poisson arrival process), rounded to whole ticks.
    Exponential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub kind: BenchmarkKind,
    pub n: u32,
    pub max_len: u64,
    pub len_dist: LengthDist,
    pub lambda_mean: f64,
    pub arrival: ArrivalDist,
    pub duty: f64,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn independent(n: u32, length: u64) -> Self {
        BenchmarkSpec {
            kind: BenchmarkKind::Independent,
            n,
            max_len: length,
            len_dist: LengthDist::Fixed,
            lambda_mean: 7999.0,
            arrival: ArrivalDist::Poisson,
            duty: 0.9,
            seed: 1,
        }
    }

    pub fn interference(n: u32, max_len: u64, seed: u64) -> Self {
        BenchmarkSpec {
            kind: BenchmarkKind::Interference,
            n,
            max_len,
            len_dist: LengthDist::Uniform { lo_frac: 0.95 },
            lambda_mean: 7999.0,
            arrival: ArrivalDist::Poisson,
            duty: 0.9,
            seed,
        }
    }

    pub fn length_bounds(&self) -> (u64, u64) {
        match self.len_dist {
            LengthDist::Fixed => (self.max_len, self.max_len),
            LengthDist::Uniform { lo_frac } => {
                ((lo_frac * self.max_len as f64).ceil() as u64, self.max_len)
            }
        }
    }
}

/// One application: a parent that forks `n_children` children and joins them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppBundle {
    pub parent: TraceProgram,
    pub children: Vec<TraceProgram>,
    pub n_children: u32,
}

impl AppBundle {
    /// Serial execution time of the whole application's workload.
    pub fn t_seq(&self) -> u64 {
        (0..self.n_children as usize)
            .map(|i| self.children[i % self.children.len()].busy_ticks())
            .sum()
    }

    pub fn child_label(&self) -> &str {
        &self.children[0].name
    }

    /// Copy with every label (names and `@` references) prefixed, so several
    /// applications can share one library.
    pub fn with_prefix(&self, prefix: &str) -> AppBundle {
        let relabel = |p: &TraceProgram| TraceProgram {
            name: format!("{prefix}{}", p.name),
            steps: p
                .steps
                .iter()
                .map(|s| match s {
                    TraceStep::Syscall { kind, args, ret } => TraceStep::Syscall {
                        kind: *kind,
                        args: args
                            .iter()
                            .map(|a| match a {
                                Arg::Trace(l) => Arg::Trace(format!("{prefix}{l}")),
                                other => other.clone(),
                            })
                            .collect(),
                        ret: *ret,
                    },
                    other => other.clone(),
                })
                .collect(),
        };
        AppBundle {
            parent: relabel(&self.parent),
            children: self.children.iter().map(relabel).collect(),
            n_children: self.n_children,
        }
    }

    pub fn library(&self) -> TraceLibrary {
        let mut lib = TraceLibrary::new();
        lib.add(self.parent.clone());
        for c in &self.children {
            lib.add(c.clone());
        }
        lib
    }
}

fn fork_join_parent(label: &str, child_label: &str, n: u32) -> TraceProgram {
    use SyscallKind::*;
    let sc = |kind, args, ret| TraceStep::Syscall { kind, args, ret };
    TraceProgram::new(
        label,
        vec![
            sc(JoinInit, vec![Arg::Imm(n)], Some(0)),
            sc(
                RcsvSpwn,
                vec![Arg::Trace(child_label.into()), Arg::Reg(0), Arg::Imm(n)],
                None,
            ),
            sc(JoinWait, vec![Arg::Reg(0)], None),
            sc(JoinFree, vec![Arg::Reg(0)], None),
            sc(RcsvExit, vec![Arg::Imm(0)], None),
        ],
    )
    .expect("generated parent is well formed")
}

fn child_program(label: &str, len: u64) -> TraceProgram {
    TraceProgram::new(
        label,
        vec![
            TraceStep::Compute(len),
            TraceStep::Syscall {
                kind: SyscallKind::JoinExit,
                args: vec![Arg::Reg(0)],
                ret: None,
            },
        ],
    )
    .expect("generated child is well formed")
}

/// Parent spawning `n` children of fixed `length` and joining them. The
/// barrier address travels to the children as their data pointer (`$r0`).
pub fn gen_independent(n: u32, length: u64) -> AppBundle {
    assert!(n >= 1, "an application needs at least one child");
    AppBundle {
        parent: fork_join_parent("parent", "child", n),
        children: vec![child_program("child", length)],
        n_children: n,
    }
}

fn gen_app(spec: &BenchmarkSpec, tag: &str, rng: &mut impl RngCore) -> AppBundle {
    let (lo, hi) = spec.length_bounds();
    let child_label = format!("{tag}_child");
    let children = (0..spec.n)
        .map(|_| child_program(&child_label, rng.random_range(lo..=hi)))
        .collect();
    AppBundle {
        parent: fork_join_parent(&format!("{tag}_parent"), &child_label, spec.n),
        children,
        n_children: spec.n,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub tick: u64,
    pub target_gmn: u32,
    pub bundle: AppBundle,
}

fn draw_gap(spec: &BenchmarkSpec, rng: &mut impl RngCore) -> u64 {
    match spec.arrival {
        ArrivalDist::Poisson => {
            let d = Poisson::new(spec.lambda_mean).expect("positive mean");
            let v: f64 = d.sample(rng);
            v as u64
        }
        ArrivalDist::Exponential => {
            let d = Exp::new(1.0 / spec.lambda_mean).expect("positive mean");
            let v: f64 = d.sample(rng);
            v.round() as u64
        }
    }
}

/// Periodic two-application stimulus: app A starts a period, app B follows
/// one gap later, and the next period starts one further gap after B. Each
/// injection targets a uniformly random GMN. Nothing is injected at or after
/// `duty * sim_length`.
pub fn gen_interference_schedule(
    spec: &BenchmarkSpec,
    sim_length: u64,
    k: u32,
    rng: &mut impl RngCore,
) -> Vec<Injection> {
    let stop = (spec.duty * sim_length as f64) as u64;
    let mut out = Vec::new();
    let mut t = 0u64;
    let mut which = 0usize;
    while t < stop {
        let tag = ["a", "b"][which];
        let target_gmn = rng.random_range(0..k);
        let bundle = gen_app(spec, tag, rng);
        out.push(Injection {
            tick: t,
            target_gmn,
            bundle,
        });
        t += draw_gap(spec, rng);
        which ^= 1;
    }
    out
}

/// The seeded generator used for every stochastic choice (SplitMix64).
pub fn seeded_rng(seed: u64) -> rand_xoshiro::SplitMix64 {
    use rand::SeedableRng;
    rand_xoshiro::SplitMix64::seed_from_u64(seed)
}
