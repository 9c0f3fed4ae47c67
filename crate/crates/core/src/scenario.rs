//! Scenario files, report CSVs, comparisons and sweeps.
//!
//! A scenario is a TOML file with an explicit schema version; unknown keys
//! are errors. A report is a CSV of per-phase, per-party ledger rows preceded
//! by `# key=value` metadata lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{run_inference, Backend, InferenceOutput, MaskStructure, RunMode, SparsitySource};
use crate::error::{Error, Result};
use crate::ideal::IdealCostModel;
use crate::kvcache::{CacheStrategy, PrefetchPolicy};
use crate::model::{predictor_quality, random_prompt, reference_trace, ModelConfig, ModelWeights};
use crate::protocols::{RunConfig, TruncationMode};
use crate::ring::FixedPointCodec;
use crate::sharing::PartyId;
use crate::transport::{phase, wall_time, Bandwidth, CostLedger};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the random toy weights; defaults to `seed`.
    #[serde(default)]
    pub model_seed: Option<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub ring: RingSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Cost model file, relative to the scenario file.
    #[serde(default)]
    pub cost_model: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingSection {
    pub bits: u32,
    pub frac: u32,
    pub truncation: TruncationMode,
}

impl Default for RingSection {
    fn default() -> Self {
        RingSection { bits: 64, frac: 16, truncation: TruncationMode::Pair }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub prompt_len: usize,
    pub gen: usize,
    pub backend: Backend,
    /// Backend of the comparison run; `None` skips it.
    pub baseline: Option<Backend>,
    pub sparsity: SparsitySource,
    pub cache: CacheStrategy,
    pub prefetch: Option<PrefetchPolicy>,
    pub dp_epsilon: f64,
    pub oracle_delta: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            prompt_len: 32,
            gen: 8,
            backend: Backend::Sparse,
            baseline: Some(Backend::Dense),
            sparsity: SparsitySource::Predictor,
            cache: CacheStrategy::default(),
            prefetch: None,
            dp_epsilon: f64::INFINITY,
            oracle_delta: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSection {
    pub bandwidth: String,
    pub rtt_ms: f64,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection { bandwidth: "1Gbps".into(), rtt_ms: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Relative to the working directory.
    pub dir: PathBuf,
    pub report: String,
    pub trace: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out"), report: "report.csv".into(), trace: "trace.csv".into() }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut s = Scenario::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.mode().validate()?;
        self.bandwidth()?;
        FixedPointCodec::new(self.ring.bits, self.ring.frac).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = self.run.prefetch {
            PrefetchPolicy::new(p.w, p.x)?;
        }
        if self.run.prompt_len == 0 {
            return Err(Error::Config("run.prompt_len must be positive".into()));
        }
        if self.run.prompt_len + self.run.gen > self.model.max_positions {
            return Err(Error::Config("run.prompt_len + run.gen exceeds model.max_positions".into()));
        }
        if !self.transport.rtt_ms.is_finite() || self.transport.rtt_ms < 0.0 {
            return Err(Error::Config("transport.rtt_ms must be a non-negative number".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> RunMode {
        RunMode {
            backend: self.run.backend,
            sparsity: self.run.sparsity,
            cache: self.run.cache,
            prefetch: self.run.prefetch,
            dp_epsilon: self.run.dp_epsilon,
            oracle_delta: self.run.oracle_delta,
        }
    }

    pub fn bandwidth(&self) -> Result<Bandwidth> {
        Bandwidth::preset(&self.transport.bandwidth)
    }

    pub fn costs(&self) -> Result<IdealCostModel> {
        match &self.cost_model {
            None => Ok(IdealCostModel::default()),
            Some(p) => {
                let path = self.base_dir.join(p);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("cannot read cost model {}: {e}", path.display())))?;
                IdealCostModel::from_toml_str(&text)
            }
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            seed: self.seed,
            codec: FixedPointCodec::new(self.ring.bits, self.ring.frac)?,
            costs: self.costs()?,
            truncation: self.ring.truncation,
            ..RunConfig::default()
        })
    }

    /// Stable identity of everything that determines the run.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).unwrap_or_default();
        format!("{:016x}", fnv1a(canonical.as_bytes()))
    }

    fn workload(&self) -> String {
        let m = &self.model;
        format!(
            "h{}-H{}-d{}-f{}-L{}-V{}/prompt{}-gen{}",
            m.hidden, m.heads, m.head_dim, m.ffn, m.layers, m.vocab, self.run.prompt_len, self.run.gen
        )
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn sparsity_label(s: &SparsitySource) -> String {
    match s {
        SparsitySource::Predictor => "predictor".into(),
        SparsitySource::Oracle => "oracle".into(),
        SparsitySource::Synthetic { ffn_sparsity, mha_sparsity, structure } => {
            let st = match structure {
                MaskStructure::Column => "column",
                MaskStructure::Elementwise => "elementwise",
                MaskStructure::Head => "head",
            };
            format!("synthetic(ffn={ffn_sparsity},mha={mha_sparsity},{st})")
        }
    }
}

/// A finished run and its optional baseline.
pub struct Report {
    pub meta: Vec<(String, String)>,
    pub ledger: CostLedger,
    pub bandwidth: Bandwidth,
    pub rtt_seconds: f64,
    pub bytes_per_element: u64,
    pub run: InferenceOutput,
    pub baseline: Option<InferenceOutput>,
}

fn ratio(a: u64, b: u64) -> f64 {
    match (a, b) {
        (0, 0) => 1.0,
        (_, 0) => f64::INFINITY,
        _ => a as f64 / b as f64,
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// Execute a scenario (and its baseline) without writing anything.
pub fn execute(s: &Scenario) -> Result<Report> {
    s.validate()?;
    let cfg = s.run_config()?;
    let model_seed = s.model_seed.unwrap_or(s.seed);
    let model = ModelWeights::random(&s.model, model_seed)?.encode(&cfg.codec)?;
    let prompt = random_prompt(s.model.vocab, s.run.prompt_len, model_seed);
    let mode = s.mode();
    let run = run_inference(&model, &prompt, s.run.gen, &mode, &cfg)?;
    let baseline = match s.run.baseline {
        Some(b) => Some(run_inference(&model, &prompt, s.run.gen, &RunMode { backend: b, ..mode.clone() }, &cfg)?),
        None => None,
    };
    let trace = reference_trace(&model, &prompt, s.run.gen)?;
    let ((fp, fr), (hp, hr)) = predictor_quality(&model, &trace, s.run.oracle_delta)?;

    let bw = s.bandwidth()?;
    let rtt = s.transport.rtt_ms / 1e3;
    let bpe = cfg.codec.bytes_per_element();
    let l = &run.ledger;
    let mut meta: Vec<(String, String)> = vec![
        ("schema_version".into(), SCHEMA_VERSION.to_string()),
        ("scenario".into(), s.name.clone()),
        ("scenario_hash".into(), s.hash()),
        ("workload".into(), s.workload()),
        ("seed".into(), s.seed.to_string()),
        ("backend".into(), s.run.backend.name().into()),
        ("sparsity".into(), sparsity_label(&s.run.sparsity)),
        ("cache".into(), s.run.cache.name().into()),
        ("dp_epsilon".into(), fmt_f(s.run.dp_epsilon)),
        ("bandwidth".into(), bw.name.into()),
        ("rtt_ms".into(), fmt_f(s.transport.rtt_ms)),
        ("bytes_per_element".into(), bpe.to_string()),
        ("total_elements".into(), l.total_elements().to_string()),
        ("total_bytes".into(), (l.total_elements() * bpe).to_string()),
        ("total_rounds".into(), l.total_rounds().to_string()),
        ("setup_elements".into(), run.setup_elements().to_string()),
        ("wall_time_s".into(), fmt_f(wall_time(l.total_rounds(), l.total_elements() * bpe, bw, rtt))),
        ("generated".into(), run.tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")),
        ("ffn_predictor_precision".into(), fmt_f(fp)),
        ("ffn_predictor_recall".into(), fmt_f(fr)),
        ("head_predictor_precision".into(), fmt_f(hp)),
        ("head_predictor_recall".into(), fmt_f(hr)),
        ("logits_match_reference".into(), (run.logits == trace.logits).to_string()),
    ];
    if let Some(b) = &baseline {
        let bl = &b.ledger;
        let fc1 = |x: &CostLedger| x.phase(phase::FC1).total_elements();
        let ffn = |x: &CostLedger| {
            [phase::FC1, phase::RELU, phase::FC2].iter().map(|p| x.phase(p).total_elements()).sum::<u64>()
        };
        meta.extend([
            ("baseline".into(), s.run.baseline.map_or("none", Backend::name).into()),
            ("baseline_total_elements".into(), bl.total_elements().to_string()),
            ("total_reduction".into(), fmt_f(ratio(bl.total_elements(), l.total_elements()))),
            // FC1 of the baseline over FC1 here: the SOMM/GEMM ratio when the
            // baseline is dense.
            ("somm_gemm_ratio".into(), fmt_f(ratio(fc1(bl), fc1(l)))),
            ("ffn_reduction".into(), fmt_f(ratio(ffn(bl), ffn(l)))),
            ("logits_match_baseline".into(), (run.logits == b.logits).to_string()),
        ]);
    }
    Ok(Report { meta, ledger: run.ledger.clone(), bandwidth: bw, rtt_seconds: rtt, bytes_per_element: bpe, run, baseline })
}

impl Report {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// `# key=value` lines, then `phase,party,elements,bytes,rounds,wall_time_s`
    /// rows, with an online `TOTAL` row per party last.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.meta {
            writeln!(out, "# {k}={v}").expect("write to string");
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["phase", "party", "elements", "bytes", "rounds", "wall_time_s"])?;
        let mut row = |label: &str, party: PartyId, elements: u64, rounds: u64| -> Result<()> {
            let bytes = elements * self.bytes_per_element;
            let t = wall_time(rounds, bytes, self.bandwidth, self.rtt_seconds);
            w.write_record([
                label.to_string(),
                (party.index() + 1).to_string(),
                elements.to_string(),
                bytes.to_string(),
                rounds.to_string(),
                fmt_f(t),
            ])?;
            Ok(())
        };
        for (label, c) in self.ledger.phases() {
            for p in PartyId::BOTH {
                row(label, p, c.elements[p.index()], c.rounds)?;
            }
        }
        for p in PartyId::BOTH {
            row("TOTAL", p, self.ledger.party_elements(p), self.ledger.total_rounds())?;
        }
        out.push_str(&String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"));
        Ok(out)
    }

    /// One row per step: the last token of the step and per-step totals over
    /// layers.
    pub fn trace_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["token", "active_heads", "misses", "merged_batch", "prefetched_heads", "ffn_active", "ledger_delta"])?;
        for st in &self.run.steps {
            let sum = |f: fn(&crate::engine::LayerStep) -> usize| st.layers.iter().map(f).sum::<usize>().to_string();
            w.write_record([
                (st.tokens.end - 1).to_string(),
                sum(|l| l.head_cells),
                sum(|l| l.misses),
                sum(|l| l.merged_rows),
                sum(|l| l.prefetched),
                sum(|l| l.ffn_nnz),
                st.ledger.total_elements().to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"))
    }

    pub fn summary(&self) -> String {
        let g = |k: &str| self.meta(k).unwrap_or("-").to_string();
        let mut s = format!(
            "{}: {} elements, {} rounds, ~{}s at {}",
            g("scenario"),
            g("total_elements"),
            g("total_rounds"),
            g("wall_time_s"),
            g("bandwidth")
        );
        if self.baseline.is_some() {
            write!(s, "; {}x fewer elements than {}", g("total_reduction"), g("baseline")).expect("write to string");
        }
        s
    }
}

/// Run a scenario and write its report and trace under `dir` (defaults to
/// the scenario's output dir).
pub fn run_scenario(s: &Scenario, dir: Option<&Path>) -> Result<(Report, PathBuf, PathBuf)> {
    let report = execute(s)?;
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| s.output.dir.clone());
    std::fs::create_dir_all(&dir)?;
    let rp = dir.join(&s.output.report);
    let tp = dir.join(&s.output.trace);
    std::fs::write(&rp, report.to_csv()?)?;
    std::fs::write(&tp, report.trace_csv()?)?;
    Ok((report, rp, tp))
}

/// A report read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedReport {
    pub meta: BTreeMap<String, String>,
    /// phase → (elements of both parties, rounds), online phases in file order.
    pub phases: Vec<(String, u64, u64)>,
}

impl ParsedReport {
    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("bad metadata line {line:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut rd = csv::Reader::from_reader(body.as_bytes());
        let mut phases: Vec<(String, u64, u64)> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<u64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad report row {:?}", rec)))
            };
            let label = rec.get(0).unwrap_or_default().to_string();
            let (elements, rounds) = (field(2)?, field(4)?);
            match phases.iter_mut().find(|(l, _, _)| *l == label) {
                Some(e) => e.1 += elements,
                None => phases.push((label, elements, rounds)),
            }
        }
        Ok(ParsedReport { meta, phases })
    }

    pub fn load(path: &Path) -> Result<Self> {
        ParsedReport::parse(&std::fs::read_to_string(path)?)
    }

    fn phase(&self, label: &str) -> (u64, u64) {
        self.phases.iter().find(|(l, _, _)| l == label).map_or((0, 0), |(_, e, r)| (*e, *r))
    }
}

/// Per-phase element ratios `a / b` plus wall-time ratios per bandwidth
/// preset. Both reports must describe the same model and workload.
pub fn compare(a: &ParsedReport, b: &ParsedReport) -> Result<String> {
    for key in ["workload", "bytes_per_element"] {
        if a.meta.get(key) != b.meta.get(key) {
            return Err(Error::Incomparable(format!(
                "{key} differs: {:?} vs {:?}",
                a.meta.get(key),
                b.meta.get(key)
            )));
        }
    }
    let mut labels: Vec<&str> = a.phases.iter().map(|(l, _, _)| l.as_str()).collect();
    for (l, _, _) in &b.phases {
        if !labels.contains(&l.as_str()) {
            labels.push(l);
        }
    }
    labels.retain(|l| *l != "TOTAL" && !phase::is_offline(l));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["phase", "a_elements", "b_elements", "ratio"])?;
    for l in labels.iter().copied().chain(["TOTAL"]) {
        let (ea, eb) = (a.phase(l).0, b.phase(l).0);
        w.write_record([l.to_string(), ea.to_string(), eb.to_string(), fmt_f(ratio(ea, eb))])?;
    }
    let bpe: u64 = a.meta.get("bytes_per_element").and_then(|v| v.parse().ok()).unwrap_or(8);
    let rtt = |r: &ParsedReport| r.meta.get("rtt_ms").and_then(|v| v.parse::<f64>().ok()).unwrap_or(0.0) / 1e3;
    for bw in Bandwidth::PRESETS {
        let t = |r: &ParsedReport| {
            let (e, rounds) = r.phase("TOTAL");
            wall_time(rounds, e * bpe, bw, rtt(r))
        };
        let (ta, tb) = (t(a), t(b));
        let r = if ta == tb { 1.0 } else { ta / tb };
        w.write_record([format!("wall_time@{}", bw.name), fmt_f(ta), fmt_f(tb), fmt_f(r)])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"))
}

/// Which scenario field a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// FFN neuron sparsity of synthetic masks.
    Sparsity,
    /// Fraction of inactive heads of synthetic masks.
    HeadSparsity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub from: f64,
    pub to: f64,
    pub steps: usize,
}

impl SweepSpec {
    /// `sparsity=0.0:0.99` or `sparsity=0.0:0.99:5` (default 5 points).
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad sweep axis {text:?}; expected NAME=FROM:TO[:STEPS]"));
        let (name, range) = text.split_once('=').ok_or_else(bad)?;
        let axis = match name.trim() {
            "sparsity" | "ffn_sparsity" => SweepAxis::Sparsity,
            "mha_sparsity" | "head_sparsity" => SweepAxis::HeadSparsity,
            other => return Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        };
        let parts: Vec<&str> = range.split(':').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let (from, to) = (num(parts[0])?, num(parts[1])?);
        let steps = match parts.get(2) {
            Some(s) => s.trim().parse::<usize>().map_err(|_| bad())?,
            None => 5,
        };
        if steps < 2 || !(0.0..=1.0).contains(&from) || !(0.0..=1.0).contains(&to) {
            return Err(Error::Config("sweep needs ≥ 2 steps within [0, 1]".into()));
        }
        Ok(SweepSpec { axis, from, to, steps })
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.steps).map(|i| self.from + (self.to - self.from) * i as f64 / (self.steps - 1) as f64).collect()
    }
}

/// Run the scenario once per sweep point with synthetic masks and tabulate
/// costs against the baseline.
pub fn sweep(s: &Scenario, spec: &SweepSpec) -> Result<String> {
    let (mut ffn, mut mha, structure) = match s.run.sparsity {
        SparsitySource::Synthetic { ffn_sparsity, mha_sparsity, structure } => (ffn_sparsity, mha_sparsity, structure),
        _ => (0.9, 0.0, MaskStructure::Column),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["value", "total_elements", "fc1_elements", "fc2_elements", "total_reduction", "somm_gemm_ratio"])?;
    for v in spec.points() {
        match spec.axis {
            SweepAxis::Sparsity => ffn = v,
            SweepAxis::HeadSparsity => mha = v,
        }
        let mut sc = s.clone();
        sc.run.sparsity = SparsitySource::Synthetic { ffn_sparsity: ffn, mha_sparsity: mha, structure };
        let r = execute(&sc)?;
        let l = &r.ledger;
        w.write_record([
            format!("{v:.4}"),
            l.total_elements().to_string(),
            l.phase(phase::FC1).total_elements().to_string(),
            l.phase(phase::FC2).total_elements().to_string(),
            r.meta("total_reduction").unwrap_or("-").to_string(),
            r.meta("somm_gemm_ratio").unwrap_or("-").to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "t"
[model]
hidden = 32
heads = 4
head_dim = 8
ffn = 64
layers = 1
vocab = 16
max_positions = 32
ffn_predictor_rank = 8
mha_predictor_rank = 2
[run]
prompt_len = 4
gen = 1
"#;

    #[test]
    fn parses_minimal_and_rejects_unknown_keys() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.run.backend, Backend::Sparse);
        let err = Scenario::parse(&MINIMAL.replace("gen = 1", "gen = 1\ngenn = 2")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("genn") && msg.contains("line"), "{msg}");
        assert!(Scenario::parse(&MINIMAL.replace("schema_version = 1", "schema_version = 9")).is_err());
    }

    #[test]
    fn synthetic_source_parses() {
        let text = format!(
            "{MINIMAL}\n[run.sparsity]\nsource = \"synthetic\"\nffn_sparsity = 0.9\nmha_sparsity = 0.5\nstructure = \"column\"\n"
        );
        let s = Scenario::parse(&text).unwrap();
        assert!(matches!(s.run.sparsity, SparsitySource::Synthetic { structure: MaskStructure::Column, .. }));
    }

    #[test]
    fn report_roundtrips_and_self_compares_to_one() {
        let s = Scenario::parse(MINIMAL).unwrap();
        let r = execute(&s).unwrap();
        let text = r.to_csv().unwrap();
        let parsed = ParsedReport::parse(&text).unwrap();
        assert_eq!(parsed.meta["total_elements"], r.ledger.total_elements().to_string());
        let table = compare(&parsed, &parsed).unwrap();
        for line in table.lines().skip(1) {
            assert!(line.ends_with(",1.000000"), "{line}");
        }
    }

    #[test]
    fn sweep_spec_parsing() {
        let s = SweepSpec::parse("sparsity=0.0:0.99").unwrap();
        assert_eq!(s.points().len(), 5);
        assert!((s.points()[4] - 0.99).abs() < 1e-12);
        assert!(SweepSpec::parse("speed=0:1").is_err());
        assert!(SweepSpec::parse("sparsity=0:2").is_err());
    }
}
