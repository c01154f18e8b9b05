use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sourceswap::bridge::server::{serve_connection, EchoHandler};
use sourceswap::bridge::{self, MessageType, RemoteBackend};
use sourceswap::config::{DenoiserKind, RunConfig};
use sourceswap::ddim::{self, ConditioningRef, Denoiser, GaussianDenoiser, NoiseSchedule, ZeroDenoiser};
use sourceswap::evalkit::{self, EvalReport, EvalRow, MetricKind};
use sourceswap::maskops::{self, BinaryMask};
use sourceswap::perturb;
use sourceswap::pipeline::manifest::{self, write_jsonl};
use sourceswap::pipeline::training::{self, AssembleOptions};
use sourceswap::pipeline::{imageio, run_pairs, CodecKind, LatentCodec, PairContext, PairRecord};
use sourceswap::refine::{self, CompositeSwap, IdentitySwap, SwapOperator};
use sourceswap::rng;
use sourceswap::LatentGrid;

use crate::{Cli, Command, OperatorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Partial,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::Partial => 1,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Partial => "partial",
        }
    }
}

pub struct Outcome {
    pub status: Status,
    pub summary: Value,
    pub message: String,
}

impl Outcome {
    fn new(status: Status, command: &str, cfg: &RunConfig, mut details: Value, message: String) -> Self {
        let map = details.as_object_mut().expect("details is an object");
        map.insert("command".into(), json!(command));
        map.insert("status".into(), json!(status.as_str()));
        map.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
        Self { status, summary: details, message }
    }
}

pub fn run(cli: &Cli, cfg: &RunConfig) -> Result<Outcome> {
    match &cli.command {
        Command::MakePairs { manifest, out, .. } => make_pairs(cfg, manifest, out),
        Command::Perturb { noise, mask, out, .. } => perturb_cmd(cfg, noise, mask, out),
        Command::Invert { image, out, .. } => invert(cfg, image, out),
        Command::Sample { noise, out, tensor_out, .. } => sample(cfg, noise, out, tensor_out.as_deref()),
        Command::Refine { reference, source, mask, out, operator, .. } => {
            refine_cmd(cfg, reference, source, mask, out, *operator)
        }
        Command::EvalRegion { source, result, mask, list, out, .. } => {
            let items = match list {
                Some(list) => read_eval_list(list)?,
                None => vec![EvalItem {
                    id: "single".into(),
                    source_path: source.clone().expect("clap enforces --source"),
                    result_path: result.clone().expect("clap enforces --result"),
                    mask_path: mask.clone().expect("clap enforces --mask"),
                }],
            };
            eval_region(cfg, &items, out.as_deref())
        }
        Command::AssembleTrain { pairs, out, seed, .. } => assemble_train(cfg, pairs, out, *seed),
        Command::ProtocolSelftest { fuzz_cases, .. } => protocol_selftest(cfg, *fuzz_cases),
    }
}

/// Codec and denoiser resolved from the config, sharing one bridge
/// connection when both are remote.
struct Backends {
    remote: Option<RemoteBackend>,
    codec: Option<Box<dyn LatentCodec + Send + Sync>>,
    denoiser: DenoiserKind,
}

impl Backends {
    fn open(cfg: &RunConfig) -> Result<Self> {
        let b = &cfg.backend;
        let needs_remote = b.denoiser == DenoiserKind::Bridge || b.codec == CodecKind::Bridge;
        let remote = if needs_remote { Some(connect(cfg)?) } else { None };
        Ok(Self { remote, codec: b.codec.builtin(), denoiser: b.denoiser })
    }

    fn codec(&self) -> &(dyn LatentCodec + Sync) {
        match &self.codec {
            Some(c) => c.as_ref(),
            None => self.remote.as_ref().expect("bridge codec implies a connection"),
        }
    }

    fn denoiser(&self) -> &(dyn Denoiser + Sync) {
        match self.denoiser {
            DenoiserKind::Zero => &ZeroDenoiser,
            DenoiserKind::Gaussian => &GaussianDenoiser,
            DenoiserKind::Bridge => self.remote.as_ref().expect("bridge denoiser implies a connection"),
        }
    }
}

fn connect(cfg: &RunConfig) -> Result<RemoteBackend> {
    let addr = cfg
        .backend
        .address
        .as_deref()
        .ok_or_else(|| anyhow!("a bridge backend needs --backend HOST:PORT or backend.address"))?;
    RemoteBackend::connect(addr, Duration::from_secs(cfg.backend.timeout_secs))
        .with_context(|| format!("connecting to bridge at {addr}"))
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    Ok(cfg.schedule.build(cfg.schedule.steps)?)
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("run_config.toml"), cfg.to_toml())?;
    Ok(())
}

fn make_pairs(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<Outcome> {
    let ingested = manifest::ingest(manifest_path)?;
    fs::create_dir_all(out)?;
    write_config(cfg, out)?;
    write_jsonl(out.join("rejects.jsonl"), &ingested.rejects)?;
    for r in &ingested.rejects {
        log::warn!("manifest line {}: {}", r.line, r.reason);
    }
    let backends = Backends::open(cfg)?;
    let schedule = schedule(cfg)?;
    let ctx = PairContext {
        codec: backends.codec(),
        denoiser: backends.denoiser(),
        schedule: &schedule,
        perturb: cfg.perturb.params(),
    };
    let jobs = cfg.jobs.unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()));
    let summary = run_pairs(&ingested.manifest, &ctx, out, jobs)?;
    let status = if summary.is_complete() && ingested.rejects.is_empty() { Status::Ok } else { Status::Partial };
    let message = format!(
        "{} pairs written to {}, {} skipped, {} manifest lines rejected",
        summary.records.len(),
        out.display(),
        summary.skipped.len(),
        ingested.rejects.len()
    );
    Ok(Outcome::new(
        status,
        "make-pairs",
        cfg,
        json!({
            "records": summary.records.len(),
            "skipped": summary.skipped,
            "rejected_lines": ingested.rejects,
            "pairs": out.join("pairs.jsonl"),
        }),
        message,
    ))
}

fn perturb_cmd(cfg: &RunConfig, noise: &Path, mask_path: &Path, out: &Path) -> Result<Outcome> {
    let z = imageio::load_tensor(noise)?;
    let mut mask = BinaryMask::load_png(mask_path)?;
    if mask.dims() != (z.height(), z.width()) {
        mask = maskops::resample_to_latent(&mask, z.height(), z.width())?;
    }
    let p = &cfg.perturb;
    let trace = perturb::perturb_traced(&z, &mask, p.mode, p.seed, p.stop_frequency)?;
    imageio::save_tensor(&trace.perturbed, out)?;
    Ok(Outcome::new(
        Status::Ok,
        "perturb",
        cfg,
        json!({
            "out": out,
            "masked_positions": mask.count(),
            "path_discrepancy": trace.path_discrepancy,
        }),
        format!("perturbed {} positions -> {}", mask.count(), out.display()),
    ))
}

fn invert(cfg: &RunConfig, image: &Path, out: &Path) -> Result<Outcome> {
    let backends = Backends::open(cfg)?;
    let schedule = schedule(cfg)?;
    let z0 = backends.codec().encode(&imageio::load_rgb(image)?)?;
    let cond = ConditioningRef(cfg.backend.cond);
    let trajectory = ddim::ddim_invert(&z0, backends.denoiser(), &schedule, cond)?;
    let z_t = trajectory.last().expect("trajectory is non-empty");
    imageio::save_tensor(z_t, out)?;
    Ok(Outcome::new(
        Status::Ok,
        "invert",
        cfg,
        json!({ "out": out, "shape": z_t.shape(), "steps": schedule.steps() }),
        format!("z_T {:?} -> {}", z_t.shape(), out.display()),
    ))
}

fn sample(cfg: &RunConfig, noise: &Path, out: &Path, tensor_out: Option<&Path>) -> Result<Outcome> {
    let backends = Backends::open(cfg)?;
    let schedule = schedule(cfg)?;
    let z_t = imageio::load_tensor(noise)?;
    let cond = ConditioningRef(cfg.backend.cond);
    let z0 = ddim::ddim_sample(&z_t, backends.denoiser(), &schedule, cond)?;
    let image = backends.codec().decode(&z0)?;
    imageio::save_rgb(&image, out)?;
    if let Some(t) = tensor_out {
        imageio::save_tensor(&image, t)?;
    }
    Ok(Outcome::new(
        Status::Ok,
        "sample",
        cfg,
        json!({ "out": out, "tensor_out": tensor_out, "steps": schedule.steps() }),
        format!("sampled image -> {}", out.display()),
    ))
}

fn refine_cmd(
    cfg: &RunConfig,
    reference: &Path,
    source: &Path,
    mask_path: &Path,
    out: &Path,
    operator: OperatorKind,
) -> Result<Outcome> {
    let reference = imageio::load_rgb(reference)?;
    let source = imageio::load_rgb(source)?;
    let mask = BinaryMask::load_png(mask_path)?;
    let composite = CompositeSwap { alpha: cfg.refine.alpha };
    let op: &dyn SwapOperator = match operator {
        OperatorKind::Composite => &composite,
        OperatorKind::Identity => &IdentitySwap,
    };
    let outcome = refine::refine(op, &reference, &source, &mask, &cfg.refine.options())?;
    imageio::save_rgb(&outcome.output, out)?;
    let mut written = Vec::new();
    for (i, img) in outcome.intermediates.iter().enumerate() {
        let p = sibling(out, &format!("round{}", i + 1));
        imageio::save_rgb(img, &p)?;
        written.push(p);
    }
    let times_ms: Vec<f64> = outcome.round_times.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    Ok(Outcome::new(
        Status::Ok,
        "refine",
        cfg,
        json!({ "out": out, "rounds": cfg.refine.rounds, "intermediates": written, "round_times_ms": times_ms }),
        format!("{} rounds -> {}", cfg.refine.rounds, out.display()),
    ))
}

/// `dir/name.png` -> `dir/name.<tag>.png`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("png");
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalItem {
    id: String,
    source_path: PathBuf,
    result_path: PathBuf,
    mask_path: PathBuf,
}

fn read_eval_list(path: &Path) -> Result<Vec<EvalItem>> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let items: Vec<EvalItem> = manifest::read_jsonl(path)?;
    if items.is_empty() {
        bail!("{} has no entries", path.display());
    }
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { root.join(p) };
    Ok(items
        .into_iter()
        .map(|i| EvalItem {
            source_path: resolve(i.source_path),
            result_path: resolve(i.result_path),
            mask_path: resolve(i.mask_path),
            id: i.id,
        })
        .collect())
}

fn eval_region(cfg: &RunConfig, items: &[EvalItem], out: Option<&Path>) -> Result<Outcome> {
    let metric: MetricKind = cfg.eval.metric.parse()?;
    let backend = match metric {
        MetricKind::Remote(_) => Some(connect(cfg)?),
        _ => None,
    };
    let params = cfg.masks.region_params();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for item in items {
        let score = (|| -> Result<_> {
            let src = imageio::load_rgb(&item.source_path)?;
            let res = imageio::load_rgb(&item.result_path)?;
            let mask = BinaryMask::load_png(&item.mask_path)?;
            Ok(evalkit::region_metric(&src, &res, &mask, &metric, &params, backend.as_ref())?)
        })();
        match score {
            Ok(s) => rows.push(EvalRow {
                id: item.id.clone(),
                region_pixel_count: s.pixel_count,
                metric_id: metric.id().to_string(),
                value: s.value,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e:#}", item.id);
                skipped.push(json!({ "id": item.id, "reason": format!("{e:#}") }));
            }
        }
    }
    if rows.is_empty() {
        bail!("no item could be evaluated");
    }
    let report = EvalReport::new(rows)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_config(cfg, dir)?;
        evalkit::emit_report(&report, dir.join("report.csv"), dir.join("report.json"))?;
    }
    let flagged = report.rows.iter().filter(|r| r.is_flagged()).count();
    let status = if skipped.is_empty() && flagged == 0 { Status::Ok } else { Status::Partial };
    let message = match &report.aggregates {
        Some(a) => format!("{} over {} items: mean {:.6}, median {:.6}", metric, a.counted, a.mean, a.median),
        None => format!("{metric}: every row flagged"),
    };
    Ok(Outcome::new(status, "eval-region", cfg, json!({ "report": report, "skipped": skipped }), message))
}

fn assemble_train(cfg: &RunConfig, pairs: &Path, out: &Path, seed: Option<u64>) -> Result<Outcome> {
    let records: Vec<PairRecord> = manifest::read_jsonl(pairs)?;
    let backends = Backends::open(cfg)?;
    let schedule = schedule(cfg)?;
    let run_seed = seed.unwrap_or(cfg.perturb.seed);
    let opts = AssembleOptions { clean_radius: cfg.masks.clean_radius, box_margin: cfg.masks.box_margin };
    fs::create_dir_all(out)?;
    write_config(cfg, out)?;
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for rec in &records {
        if rec.codec != backends.codec().id() {
            log::warn!("pair {} was built with codec {}, assembling with {}", rec.id, rec.codec, backends.codec().id());
        }
        let s = rng::derive_seed(run_seed, &rec.id);
        match training::assemble_training_sample(rec, backends.codec(), &schedule, s, &opts, out) {
            Ok(sample) => samples.push(sample),
            Err(e) => {
                log::warn!("skipping {}: {e}", rec.id);
                skipped.push(json!({ "id": rec.id, "reason": e.to_string() }));
            }
        }
    }
    write_jsonl(out.join("training.jsonl"), &samples)?;
    let status = if skipped.is_empty() { Status::Ok } else { Status::Partial };
    Ok(Outcome::new(
        status,
        "assemble-train",
        cfg,
        json!({ "samples": samples.len(), "skipped": skipped, "manifest": out.join("training.jsonl") }),
        format!("{} training samples -> {}", samples.len(), out.display()),
    ))
}

fn protocol_selftest(cfg: &RunConfig, fuzz_cases: usize) -> Result<Outcome> {
    let mut checks: Vec<(String, bool, String)> = Vec::new();
    let mut check = |name: &str, r: Result<()>| {
        let (ok, detail) = match r {
            Ok(()) => (true, String::new()),
            Err(e) => (false, format!("{e:#}")),
        };
        checks.push((name.to_string(), ok, detail));
    };

    check(
        "hello-golden",
        (|| {
            let bytes = bridge::frame_message(MessageType::Hello as u8, &[])?;
            let golden = [0x53, 0x53, 0x57, 0x50, 0x01, 0x00, 0x0A, 0, 0, 0, 0, 0, 0, 0, 0];
            if bytes != golden {
                bail!("HELLO frame {bytes:02x?} differs from golden bytes");
            }
            Ok(())
        })(),
    );

    check(
        "frame-fuzz",
        (|| {
            let mut r = rng::seeded(0x5353_5750);
            for case in 0..fuzz_cases {
                let len = rng::uniform_below(&mut r, 256) as usize;
                let payload: Vec<u8> = (0..len).map(|_| rng::uniform_below(&mut r, 256) as u8).collect();
                let msg_type = rng::uniform_below(&mut r, 256) as u8;
                let bytes = bridge::frame_message(msg_type, &payload)?;
                let (msg, used) = bridge::parse_message(&bytes)?;
                if used != bytes.len() || msg.msg_type != msg_type || msg.payload != payload {
                    bail!("round trip mismatch in case {case}");
                }
                // mutated frames must parse or fail cleanly
                let mut mangled = bytes.clone();
                let at = rng::uniform_below(&mut r, mangled.len() as u64) as usize;
                mangled[at] ^= 1 + rng::uniform_below(&mut r, 255) as u8;
                let _ = bridge::parse_message(&mangled);
            }
            Ok(())
        })(),
    );

    let (backend, target) = match &cfg.backend.address {
        Some(addr) => (connect(cfg), addr.clone()),
        None => {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            thread::spawn(move || {
                if let Ok((mut s, _)) = listener.accept() {
                    let _ = serve_connection(&mut s, &EchoHandler);
                }
            });
            let timeout = Duration::from_secs(cfg.backend.timeout_secs);
            (
                RemoteBackend::connect(addr, timeout).context("connecting to in-process echo server"),
                "in-process echo".to_string(),
            )
        }
    };
    let echo = cfg.backend.address.is_none();
    match backend {
        Ok(backend) => {
            check("handshake", Ok(()));
            let z = LatentGrid::from_fn(backend.capabilities().latent_channels.max(1) as usize, 4, 4, |c, y, x| {
                (c * 16 + y * 4 + x) as f64 * 0.25 - 2.0
            })?;
            check(
                "denoise",
                (|| {
                    let out = backend.with_session(|s| s.denoise(&z, 10, ConditioningRef(0)))?;
                    if out.shape() != z.shape() {
                        bail!("shape {:?} for request {:?}", out.shape(), z.shape());
                    }
                    if echo && out != z {
                        bail!("echo server changed the tensor");
                    }
                    Ok(())
                })(),
            );
        }
        Err(e) => check("handshake", Err(e)),
    }

    let failed = checks.iter().filter(|c| !c.1).count();
    let status = if failed == 0 { Status::Ok } else { Status::Partial };
    let message = checks
        .iter()
        .map(|(n, ok, d)| {
            format!(
                "{} {n}{}",
                if *ok { "PASS" } else { "FAIL" },
                if d.is_empty() { String::new() } else { format!(": {d}") }
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    let checks_json: Vec<Value> = checks.iter().map(|(n, ok, d)| json!({ "name": n, "ok": ok, "detail": d })).collect();
    Ok(Outcome::new(status, "protocol-selftest", cfg, json!({ "target": target, "checks": checks_json }), message))
}
