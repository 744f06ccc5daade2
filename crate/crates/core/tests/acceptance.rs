//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{probe_sum, random_proj, random_seq, rng, tiny_config, uniform};
use jco_mvton::attention::{build_mask, joint_attention, joint_attention_blockskip, Segmentation, SCORE_MACS};
use jco_mvton::cli::EvalReport;
use jco_mvton::data::{bootstrap_round, gen_pool, gen_triplet, write_pool, GenConfig, OracleReplay, Thresholds};
use jco_mvton::flow::{euler_sample, rf_interpolate, rf_target, Parameterization, RfConfig};
use jco_mvton::image::ImageTensor;
use jco_mvton::model::{FrozenAudit, JcoModel, LoraConfig, ModelConfig, TrainConfig, TrainItem, TrainPolicy, Trainer};
use jco_mvton::patch::GridDims;
use jco_mvton::rope::{apply_rope, build_positions, PosScheme, PositionGrid, RopeConfig};
use jco_mvton::tensor::{grad_check, Tape, Tensor, Var, NEG_SENTINEL};
use rand::Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

// Desk-scale run. The backbone stage pretrains the text+noise branch
// unconditionally before the conditional-only stage.
const E2E_RECORDS: usize = 64;
const E2E_SUBSET: usize = 8;
const E2E_BACKBONE_STEPS: usize = 8000;
const E2E_STEPS: usize = 2000;
const E2E_SAMPLER_STEPS: usize = 10;
const BACKBONE_CONFIG: &str = r#"{"train": {"batch_size": 8}}"#;
const E2E_CONFIG: &str = r#"{"train": {"batch_size": 8, "lr": 0.008, "cosine_decay": true}}"#;
const SSIM_MIN: f64 = 0.85;
const PSNR_MIN: f64 = 22.0;

fn ok<T>(r: jco_mvton::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_positions(r: &mut impl Rng, n: usize) -> PositionGrid {
    PositionGrid::new((0..n).map(|_| (r.gen_range(0..8), r.gen_range(0..8))).collect())
}

fn random_seg(r: &mut impl Rng) -> Segmentation {
    Segmentation::new(r.gen_range(0..=4), r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=6))
}

fn zero_leak() -> Outcome {
    let mut blocked = 0usize;
    for case in 0..100u64 {
        let mut r = rng(1000 + case);
        let seg = random_seg(&mut r);
        let heads = r.gen_range(1..4);
        let d = 4 * heads * r.gen_range(1..3);
        let seq = random_seq(&mut r, seg, d);
        let proj = random_proj(&mut r, d);
        let pos = random_positions(&mut r, seg.total());
        let res = ok(joint_attention(&seq, &proj, Some(&pos), Some(&build_mask(seg)), heads))?;
        for w in &res.weights {
            for i in 0..seg.total() {
                for j in 0..seg.total() {
                    let v = w.at2(i, j);
                    if seg.allowed(i, j) {
                        ensure(v > 0.0, || format!("case {case}: allowed ({i},{j}) has zero weight"))?;
                    } else {
                        ensure(v.to_bits() == 0, || format!("case {case}: ({i},{j}) leaked {v:e}"))?;
                        blocked += 1;
                    }
                }
            }
        }
    }
    Ok(format!("100 configurations, {blocked} person<->garment weights all exactly 0"))
}

fn block_skip() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut r = rng(2000 + case);
        let seg = random_seg(&mut r);
        let heads = r.gen_range(1..4);
        let d = 4 * heads * r.gen_range(1..3);
        let seq = random_seq(&mut r, seg, d);
        let proj = random_proj(&mut r, d);
        let pos = random_positions(&mut r, seg.total());
        let dense = ok(joint_attention(&seq, &proj, Some(&pos), Some(&build_mask(seg)), heads))?;
        let skip = ok(joint_attention_blockskip(&seq, &proj, Some(&pos), heads))?;
        let diff = dense.output.tokens.max_abs_diff(&skip.output.tokens);
        worst = worst.max(diff);
        ensure(diff < 1e-12, || format!("case {case}: diff {diff:e}"))?;
        let dk = (d / heads) as u64;
        let per_head = (dense.flops.get(SCORE_MACS) - skip.flops.get(SCORE_MACS)) / heads as u64;
        let want = 2 * seg.reference as u64 * seg.garment as u64 * dk;
        ensure(per_head == want, || format!("case {case}: saved {per_head} MACs per head, want {want}"))?;
    }
    Ok(format!("100 cases, max-abs-diff {worst:.1e}, MAC savings exact"))
}

/// Worst relative error of `op` against each input in turn.
fn check_op(inputs: &[Tensor], seed: u64, op: &dyn Fn(&mut Tape, &[Var]) -> jco_mvton::Result<Var>) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let err = ok(grad_check(
            |tape, x| {
                let vars: Vec<Var> =
                    inputs.iter().enumerate().map(|(i, t)| if i == k { x } else { tape.constant(t.clone()) }).collect();
                let out = op(tape, &vars)?;
                probe_sum(tape, out, seed)
            },
            &inputs[k],
            1e-5,
        ))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn model_loss_rel_err(cfg: &ModelConfig) -> Result<f64, String> {
    let mut model = ok(JcoModel::init(cfg.clone(), 3))?;
    model.fill_zero_init(4, 0.3);
    let img = |c, h, w, seed| {
        let mut r = rng(seed);
        ImageTensor::from_fn(c, h, w, |_, _, _| r.gen_range(0.0..1.0))
    };
    let [h, w] = cfg.image;
    let [gh, gw] = cfg.garment;
    let (x, p, g) = (img(3, h, w, 10), img(3, h, w, 11), img(3, gh, gw, 12));
    let tokens = (h / cfg.patch) * (w / cfg.patch);
    let width = cfg.patch * cfg.patch * cfg.channels;
    let target = Tensor::from_fn(&[tokens, width], |i| (i as f64 * 0.13).sin());
    let mut worst = 0.0f64;
    for k in 0..model.params.len() {
        let err = ok(grad_check(
            |tape, leaf| {
                let vars: Vec<Var> = model
                    .params
                    .iter()
                    .enumerate()
                    .map(|(i, p)| if i == k { leaf } else { tape.constant(p.value.clone()) })
                    .collect();
                let fwd = model.forward_on_tape(tape, &vars, &x, Some(&p), Some(&g), 0.37)?;
                let tv = tape.constant(target.clone());
                tape.mse(fwd.velocity, tv)
            },
            &model.params.by_id(k).value,
            1e-5,
        ))?;
        ensure(err < 1e-4, || format!("{}: rel-err {err:e}", model.params.by_id(k).name))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn one_block_config() -> ModelConfig {
    ModelConfig {
        blocks: 1,
        image: [4, 8],
        garment: [4, 8],
        text_len: 2,
        lora: Some(LoraConfig { rank: 2, alpha: 2.0 }),
        ..tiny_config()
    }
}

fn gradient_audit() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut r = rng(3000 + case);
        let (m, n, k) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let mut u = |shape: &[usize], s: f64| uniform(&mut r, shape, s);
        let mn = [u(&[m, n], 1.0), u(&[m, n], 1.0)];
        let c = 1.7;
        let mut errs = vec![
            check_op(&[u(&[m, k], 1.0), u(&[k, n], 1.0)], case, &|t, v| t.matmul(v[0], v[1]))?,
            check_op(&[u(&[m, k], 1.0), u(&[n, k], 1.0)], case, &|t, v| t.matmul_nt(v[0], v[1]))?,
            check_op(&mn, case, &|t, v| t.add(v[0], v[1]))?,
            check_op(&mn, case, &|t, v| t.sub(v[0], v[1]))?,
            check_op(&mn, case, &|t, v| t.mul(v[0], v[1]))?,
            check_op(&mn, case, &|t, v| t.mse(v[0], v[1]))?,
            check_op(&mn[..1], case, &|t, v| Ok(t.scale(v[0], c)))?,
            check_op(&mn[..1], case, &|t, v| Ok(t.add_scalar(v[0], c)))?,
            check_op(&mn[..1], case, &|t, v| Ok(t.silu(v[0])))?,
            check_op(&mn[..1], case, &|t, v| Ok(t.sum(v[0])))?,
            check_op(&mn[..1], case, &|t, v| Ok(t.mean(v[0])))?,
            check_op(&mn[..1], case, &|t, v| t.transpose(v[0]))?,
            check_op(&mn[..1], case, &|t, v| t.reshape(v[0], &[n, m]))?,
            check_op(&mn[..1], case, &|t, v| t.rows(v[0], 0, m))?,
            check_op(&mn[..1], case, &|t, v| t.slice(v[0], 1, 0, n))?,
            check_op(&mn[..1], case, &|t, v| t.softmax(v[0], None))?,
            check_op(&mn, case, &|t, v| t.concat(v, 0))?,
            check_op(&mn, case, &|t, v| t.concat(v, 1))?,
        ];
        let row = [u(&[m, n], 1.0), u(&[n], 1.0)];
        errs.push(check_op(&row, case, &|t, v| t.add_row(v[0], v[1]))?);
        errs.push(check_op(&row, case, &|t, v| t.mul_row(v[0], v[1]))?);
        errs.push(check_op(&row, case, &|t, v| t.rms_norm(v[0], Some(v[1]), 1e-6))?);
        errs.push(check_op(&row[..1], case, &|t, v| t.rms_norm(v[0], None, 1e-6))?);
        let wide = [u(&[m, n + 1], 2.0)];
        let mask = Tensor::from_fn(&[m, n + 1], |i| if i % (n + 1) != 0 && i % 3 == 1 { NEG_SENTINEL } else { 0.0 });
        errs.push(check_op(&wide, case, &|t, v| t.softmax(v[0], Some(&mask)))?);
        let angles = u(&[m, n], 3.0);
        errs.push(check_op(&[u(&[m, 2 * n], 1.0)], case, &|t, v| t.rotate_pairs(v[0], &angles))?);
        for (op, e) in errs.iter().enumerate() {
            ensure(*e < 1e-4, || format!("case {case}, op #{op}: rel-err {e:e}"))?;
            worst = worst.max(*e);
        }
    }
    let model = model_loss_rel_err(&one_block_config())?;
    Ok(format!("24 ops x 20 shapes worst {worst:.1e}; 1-block model loss, every parameter, worst {model:.1e}"))
}

fn flow_identities() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut r = rng(4000 + case);
        let n = r.gen_range(1..20);
        let x0 = uniform(&mut r, &[n], 1.0);
        let eps = uniform(&mut r, &[n], 2.0);
        ensure(ok(rf_interpolate(&x0, &eps, 0.0))? == x0, || format!("case {case}: x_0 != x0"))?;
        ensure(ok(rf_interpolate(&x0, &eps, 1.0))? == eps, || format!("case {case}: x_1 != eps"))?;

        let t = r.gen_range(0.0..0.99);
        let xt = ok(rf_interpolate(&x0, &eps, t))?;
        let scaled = RfConfig { parameterization: Parameterization::TimeScaled, t_max: 0.99, sampler_steps: 1 };
        let target = ok(rf_target(&x0, &xt, &eps, t, &scaled))?;
        for i in 0..n {
            let want = t / (1.0 - t) * (x0.data()[i] - eps.data()[i]);
            let d = (target.data()[i] - want).abs();
            ensure(d < 1e-12, || format!("case {case}: target off by {d:e}"))?;
        }

        let dir = x0.zip_map(&eps, |a, e| a - e).map_err(|e| e.to_string())?;
        let steps = r.gen_range(1..200);
        let cv = RfConfig { parameterization: Parameterization::ConstantVelocity, t_max: 1.0, sampler_steps: steps };
        let out = ok(euler_sample(&|_: &Tensor, _: f64| Ok(dir.clone()), &eps, &cv))?;
        let d = out.max_abs_diff(&x0);
        worst = worst.max(d);
        ensure(d <= 1e-12, || format!("case {case}: {steps} Euler steps off by {d:e}"))?;
    }
    Ok(format!("100 cases, Euler recovery worst {worst:.1e}"))
}

fn rope_suite() -> Outcome {
    let dot = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum() };
    let rotate = |v: &Tensor, p: (usize, usize), c: &RopeConfig| ok(apply_rope(v, &PositionGrid::new(vec![p]), c));
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut r = rng(5000 + case);
        let cfg = RopeConfig::new(4 * r.gen_range(1..5));
        let q = uniform(&mut r, &[1, cfg.head_dim], 1.0);
        let k = uniform(&mut r, &[1, cfg.head_dim], 1.0);
        let mut p = || (r.gen_range(0..40), r.gen_range(0..40));
        let (m, n, s) = (p(), p(), p());
        let base = dot(&rotate(&q, m, &cfg)?, &rotate(&k, n, &cfg)?);
        let shifted = dot(&rotate(&q, (m.0 + s.0, m.1 + s.1), &cfg)?, &rotate(&k, (n.0 + s.0, n.1 + s.1), &cfg)?);
        let norm = (rotate(&q, m, &cfg)?.norm() - q.norm()).abs();
        worst = worst.max((shifted - base).abs()).max(norm);
        ensure((shifted - base).abs() < 1e-9, || format!("trial {case}: score moved {:e}", shifted - base))?;
        ensure(norm < 1e-9, || format!("trial {case}: norm moved {norm:e}"))?;
    }
    let mut r = rng(5500);
    for shape in 0..10 {
        let noise = GridDims::new(r.gen_range(1..10), r.gen_range(1..10));
        let garment = GridDims::new(r.gen_range(1..6), r.gen_range(1..6));
        let text = r.gen_range(0..5);
        let pos = ok(build_positions(PosScheme::Shared, noise, noise, garment, text))?;
        let n = noise.area();
        let grid: Vec<_> = (0..noise.rows).flat_map(|a| (0..noise.cols).map(move |b| (a, b))).collect();
        let offset: Vec<_> = (0..garment.rows).flat_map(|a| (0..garment.cols).map(move |b| (a, noise.cols + b))).collect();
        ensure(pos.span(text, n) == &grid[..], || format!("shape {shape}: noise grid"))?;
        ensure(pos.span(text + n, n) == &grid[..], || format!("shape {shape}: reference does not share noise positions"))?;
        ensure(pos.span(text + 2 * n, garment.area()) == &offset[..], || format!("shape {shape}: garment offsets"))?;
    }
    Ok(format!("100 trials worst drift {worst:.1e}; 10 shared layouts enumerate (0,W),(0,W+1),..."))
}

fn items(samples: &[jco_mvton::data::TripletSample]) -> Vec<TrainItem<'_>> {
    samples
        .iter()
        .map(|s| TrainItem { target: &s.reference, person: Some(&s.person), garment: Some(&s.garment) })
        .collect()
}

fn branches_and_freezing() -> Outcome {
    let narrow = ModelConfig { dim: 16, heads: 2, blocks: 2, ..ModelConfig::default() };
    let mut model = ok(JcoModel::init(narrow.clone(), 0))?;
    model.fill_zero_init(1, 0.05);
    model.init_conditional_branches();
    let mut copied = 0;
    for b in 0..narrow.blocks {
        for m in ["q", "k", "v", "o"] {
            let tn = model.params.get(&format!("blocks.{b}.attn.tn.{m}")).map_err(|e| e.to_string())?;
            for br in ["c1", "c2"] {
                let c = model.params.get(&format!("blocks.{b}.attn.{br}.{m}")).map_err(|e| e.to_string())?;
                ensure(tn.data().iter().zip(c.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                    format!("blocks.{b}.attn.{br}.{m} is not a bitwise copy")
                })?;
                copied += 1;
            }
        }
    }

    let samples: Vec<_> = (0..4).map(gen_triplet).collect();
    let data = items(&samples);
    ok(model.set_trainable(TrainPolicy::ConditionalOnly))?;
    let audit = FrozenAudit::capture(&model);
    let start = model.clone();
    let mut trainer = Trainer::new(TrainConfig { batch_size: 2, ..TrainConfig::default() });
    for _ in 0..100 {
        let batch: Vec<_> = trainer.batch_indices(data.len()).into_iter().map(|i| data[i]).collect();
        ok(trainer.train_step(&mut model, &batch))?;
    }
    let changed = audit.changed(&model);
    ensure(changed.is_empty(), || format!("frozen parameters changed: {changed:?}"))?;
    ensure(model != start, || "conditional branches never moved".into())?;

    let base = tiny_config();
    let mut with = ok(JcoModel::init(ModelConfig { lora: Some(LoraConfig { rank: 4, alpha: 8.0 }), ..base.clone() }, 5))?;
    with.fill_zero_init(7, 0.2);
    for p in with.params.iter_mut().filter(|p| p.name.ends_with("lora_up")) {
        p.value = p.value.map(|_| 0.0);
    }
    let mut without = ok(JcoModel::init(base.clone(), 6))?;
    for p in without.params.iter_mut() {
        p.value = with.params.get(&p.name).map_err(|e| e.to_string())?.clone();
    }
    let s = gen_triplet(1);
    let crop = |img: &ImageTensor, h, w| ImageTensor::from_fn(3, h, w, |c, y, x| img.get(c, y, x));
    let [h, w] = base.image;
    let [gh, gw] = base.garment;
    let (x, p, g) = (crop(&s.reference, h, w), crop(&s.person, h, w), crop(&s.garment, gh, gw));
    let a = ok(with.forward(&x, Some(&p), Some(&g), 0.6))?;
    let b = ok(without.forward(&x, Some(&p), Some(&g), 0.6))?;
    ensure(a.max_abs_diff(&b) == 0.0, || format!("zero adapters moved outputs by {:e}", a.max_abs_diff(&b)))?;
    Ok(format!("{copied} branch matrices copied bitwise; {} frozen tensors untouched over 100 steps; zero LoRA diff 0", audit.checked()))
}

fn jco(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_jco")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("jco {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn report(path: &Path) -> Result<EvalReport, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("summary has no {key}"))
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let at = |name: &str| -> PathBuf { dir.path().join(name) };
    std::fs::write(at("cfg.json"), E2E_CONFIG).map_err(|e| e.to_string())?;
    std::fs::write(at("backbone.json"), BACKBONE_CONFIG).map_err(|e| e.to_string())?;
    let (cfg, bb_cfg, data) = (at("cfg.json"), at("backbone.json"), at("data"));
    let (cfg, bb_cfg, data) = (p(&cfg), p(&bb_cfg), p(&data));
    let count = E2E_RECORDS.to_string();
    jco(&["gen-data", "--seed", "0", "--count", &count, "--out", data, "--config", cfg])?;

    let train = |config: &str, out: &Path, steps: usize, extra: &[&str]| {
        let steps = steps.to_string();
        let mut args = vec!["train", "--config", config, "--data", data, "--out", p(out), "--steps", &steps];
        args.extend(extra);
        jco(&args)
    };
    train(cfg, &at("untrained"), 0, &[])?;
    train(bb_cfg, &at("backbone"), E2E_BACKBONE_STEPS, &["--unconditional", "--policy", "full"])?;
    let subset = E2E_SUBSET.to_string();
    let summary = train(
        cfg,
        &at("trained"),
        E2E_STEPS,
        &["--init-from", p(&at("backbone")), "--policy", "conditional_only", "--subset", &subset],
    )?;
    let (first, last) = (num(&summary, "initial_loss")?, num(&summary, "final_loss_ma")?);

    let eval = |ckpt: &str| -> Result<(f64, f64), String> {
        let out = at(&format!("{ckpt}.json"));
        let steps = E2E_SAMPLER_STEPS.to_string();
        jco(&["eval", "--ckpt", p(&at(ckpt)), "--data", data, "--report", p(&out), "--steps", &steps, "--limit", &subset])?;
        let r = report(&out)?;
        Ok((r.metric("ssim").ok_or("no ssim")?, r.metric("psnr").ok_or("no psnr")?))
    };
    let (ssim0, psnr0) = eval("untrained")?;
    let (ssim, psnr) = eval("trained")?;
    let detail = format!(
        "loss {first:.4} -> MA {last:.4} ({:.0}% drop); SSIM {ssim0:.3} -> {ssim:.3} (need {SSIM_MIN}); PSNR {psnr0:.2} -> {psnr:.2} dB (need {PSNR_MIN})",
        100.0 * (1.0 - last / first)
    );
    ensure(last <= 0.5 * first, || format!("loss did not halve: {detail}"))?;
    ensure(ssim > ssim0 && psnr > psnr0, || format!("does not beat the untrained checkpoint: {detail}"))?;
    ensure(ssim >= SSIM_MIN && psnr >= PSNR_MIN, || format!("below threshold: {detail}"))?;
    Ok(detail)
}

fn ablations() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let at = |name: &str| -> PathBuf { dir.path().join(name) };
    let data = at("data");
    jco(&["gen-data", "--seed", "5", "--count", "8", "--out", p(&data)])?;
    let ablate = |axis: &str, out: &str| -> Result<(Value, Vec<u8>), String> {
        let summary = jco(&["ablate", "--axis", axis, "--data", p(&data), "--out", p(&at(out)), "--steps", "40", "--eval-limit", "2", "--sample-steps", "4"])?;
        let bytes = std::fs::read(at(out).join("comparison.json")).map_err(|e| e.to_string())?;
        ensure(summary["rows"].as_array().map_or(0, Vec::len) == 2, || format!("{axis}: expected two rows"))?;
        Ok((serde_json::from_slice(&bytes).map_err(|e| e.to_string())?, bytes))
    };
    let (mask, first) = ablate("mask", "mask_a")?;
    ensure(mask["checks"]["matches"] == true, || format!("mask MAC check failed: {}", mask["checks"]))?;
    let (_, second) = ablate("mask", "mask_b")?;
    ensure(first == second, || "mask ablation is not byte-identical across runs".into())?;
    let (pos, _) = ablate("pos_scheme", "pos")?;
    let losses: Vec<String> = pos["rows"]
        .as_array()
        .ok_or("no rows")?
        .iter()
        .map(|r| format!("{}={:.6}", r["tag"].as_str().unwrap_or("?"), r["final_loss"].as_f64().unwrap_or(f64::NAN)))
        .collect();

    let unmasked = ModelConfig { mask_enabled: false, ..one_block_config() };
    let err = model_loss_rel_err(&unmasked)?;
    let samples: Vec<_> = (0..3).map(gen_triplet).collect();
    let data = items(&samples);
    let run = || -> Result<Vec<u64>, String> {
        let mut m = ok(JcoModel::init(ModelConfig { dim: 16, heads: 2, blocks: 1, mask_enabled: false, ..ModelConfig::default() }, 1))?;
        ok(m.set_trainable(TrainPolicy::Full))?;
        let mut tr = Trainer::new(TrainConfig { batch_size: 2, ..TrainConfig::default() });
        (0..10)
            .map(|_| {
                let batch: Vec<_> = tr.batch_indices(data.len()).into_iter().map(|i| data[i]).collect();
                ok(tr.train_step(&mut m, &batch)).map(f64::to_bits)
            })
            .collect()
    };
    ensure(run()? == run()?, || "mask-off training is not deterministic".into())?;
    Ok(format!(
        "mask and pos_scheme reports written ({}); mask-off deterministic, gradient rel-err {err:.1e}",
        losses.join(", ")
    ))
}

fn pipeline_determinism() -> Outcome {
    let thresholds = Thresholds { g: 0.9, p: 0.9, r: 0.5 };
    let run = |dir: &Path| -> Result<Vec<f64>, String> {
        let mut pool = ok(gen_pool(42, 8, &GenConfig::default()))?;
        let mut rates = Vec::new();
        for round in 1..=3 {
            let (next, report) = ok(bootstrap_round(&pool, &OracleReplay, &thresholds, round, 7))?;
            ok(write_pool(dir.join(format!("round_{round}")), &next))?;
            rates.push(report.retention_rate);
            pool = next;
        }
        Ok(rates)
    };
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let rates = run(a.path())?;
    run(b.path())?;
    let mut files = 0;
    for round in 1..=3 {
        let sub = format!("round_{round}");
        let mut names: Vec<_> = std::fs::read_dir(a.path().join(&sub)).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            let x = std::fs::read(a.path().join(&sub).join(&n)).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.path().join(&sub).join(&n)).map_err(|e| e.to_string())?;
            ensure(x == y, || format!("{sub}/{n:?} differs"))?;
            files += 1;
        }
    }
    ensure(rates.iter().all(|&r| r == 1.0), || format!("oracle retention {rates:?}"))?;
    Ok(format!("{files} files byte-identical across two runs; oracle retention {rates:?}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("zero-leak mask", zero_leak, Duration::from_secs(10)),
        ("block-skip equivalence", block_skip, Duration::from_secs(30)),
        ("gradient audit", gradient_audit, Duration::from_secs(120)),
        ("rectified-flow identities", flow_identities, Duration::from_secs(10)),
        ("rope suite", rope_suite, Duration::from_secs(10)),
        ("branch init and freezing", branches_and_freezing, Duration::from_secs(120)),
        ("desk-scale end-to-end", end_to_end, Duration::from_secs(30 * 60)),
        ("ablation harness", ablations, Duration::from_secs(30 * 60)),
        ("pipeline determinism", pipeline_determinism, Duration::from_secs(5 * 60)),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = result.and_then(|d| {
            ensure(took <= *budget, || format!("{d}; over the {}s budget", budget.as_secs()))?;
            Ok(d)
        });
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{:.1}s] {detail}", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{:.1}s] {why}", took.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
