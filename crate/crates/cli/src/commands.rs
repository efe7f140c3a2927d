use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};
use tilenpu::gpt2::{count_flops, data, extract_gemm_sizes, Gpt2, ModelConfig, ParamStore, RunConfig};
use tilenpu::kernel::{schedule_kernel_with, ScheduleOptions};
use tilenpu::layout::{operand_path, Step};
use tilenpu::offload::io::{read_matrix, write_matrix};
use tilenpu::offload::{divergence, random_operands};
use tilenpu::sim::{run_with, RunOptions};
use tilenpu::*;

use crate::{write_report, CmdResult, DomainError, FlopsArgs, GemmArgs, KernelArgs, LayoutArgs, PlanArgs, RunManifest, SimulateArgs, TrainArgs};

fn load_cost(path: Option<&Path>, m: &mut RunManifest) -> Result<CostConfig, DomainError> {
    match path {
        Some(p) => {
            m.input(p)?;
            m.arg("cost", p.display());
            Ok(CostConfig::load(p)?)
        }
        None => Ok(CostConfig::default()),
    }
}

fn emit(report: Option<&Path>, manifest: &RunManifest, body: Value, text: &str) -> CmdResult {
    if report.is_none_or(|p| p != Path::new("-")) {
        print!("{text}");
    }
    match report {
        Some(p) => write_report(p, manifest, body),
        None => Ok(()),
    }
}

pub fn plan(a: PlanArgs) -> CmdResult {
    let grid = Grid::default();
    let p = tilenpu::plan(a.size, a.tile, &grid)?;
    let mut m = RunManifest::new("plan", 0);
    m.arg("size", a.size).arg("tile", a.tile).arg("dump_arch", a.dump_arch).arg("emit_schedule", a.emit_schedule);
    let mut text = p.summary();
    if a.dump_arch {
        text += &grid.dump();
    }
    if a.emit_schedule {
        text += &p.emit_schedule();
    }
    let mut body = json!({
        "plan": {
            "original": p.original,
            "padded": p.problem,
            "tile": p.tile,
            "padding": p.padding,
            "acc_depth": p.acc_depth,
            "out_tiles": p.out_tiles,
            "out_tiles_per_core": p.out_tiles_per_core(),
            "runtime_params": p.runtime_params,
            "repeat_a": p.repeat_a,
            "repeat_b": p.repeat_b,
            "l1_footprint_bytes": p.tile.l1_footprint(),
        }
    });
    if a.dump_arch {
        body["arch"] = Value::String(grid.dump());
    }
    if a.emit_schedule {
        body["schedule"] = p.emit_schedule().lines().map(|l| Value::String(l.to_string())).collect();
    }
    emit(a.report.as_deref(), &m, body, &text)
}

pub fn layout(a: LayoutArgs) -> CmdResult {
    let tile = match (a.tile.0.as_slice(), a.op) {
        (&[m, k, n], _) => TileShape::new(m, k, n),
        (&[r, c], MicroOperand::A) => TileShape::new(r, c, 4),
        (&[r, c], MicroOperand::B) => TileShape::new(4, r, c),
        (&[r, c], MicroOperand::C) => TileShape::new(r, 8, c),
        _ => unreachable!("parser yields two or three parts"),
    };
    let (tr, tc) = a.op.tile_dims(tile);
    let (rows, cols) = match a.size.as_ref().map(|d| d.0.as_slice()) {
        Some(&[r, c]) => (r, c),
        Some(_) => return Err(DomainError::new("LayoutError::SizeMismatch", "--size takes RxC")),
        None => (tr, tc),
    };
    let path = operand_path(a.op, rows, cols, tile)?;
    let (eb, len) = (path.elem_bytes(), path.len());
    if a.dump {
        print!("{}", path.combined().dump(eb, len));
        return Ok(());
    }
    let mut s = String::new();
    let _ = writeln!(s, "operand = {:?}", a.op);
    let _ = writeln!(s, "matrix = {rows}x{cols}");
    let _ = writeln!(s, "tile = {tr}x{tc}");
    let _ = writeln!(s, "elem_bytes = {eb}");
    for (i, st) in path.stages.iter().enumerate() {
        let _ = writeln!(s, "stage{i}.from = {:?}", st.from);
        let _ = writeln!(s, "stage{i}.to = {:?}", st.to);
        for step in &st.steps {
            match step {
                Step::Dma(p) => {
                    let dims: Vec<String> = p.dims.iter().map(|d| format!("{}/{}", d.extent, d.stride)).collect();
                    let _ = writeln!(s, "stage{i}.granule_bytes = {}", p.elem_bytes);
                    let _ = writeln!(s, "stage{i}.dims = {}", dims.join(" "));
                    let _ = writeln!(s, "stage{i}.descriptors = {}", p.descriptors().len());
                }
                Step::Fixup(r) => {
                    let sw: Vec<String> = r.swaps.iter().map(|(x, y)| format!("{x}<->{y}")).collect();
                    let _ = writeln!(s, "stage{i}.fixup = period {} swaps {}", r.period, sw.join(" "));
                }
            }
        }
    }
    let map = path.combined().element_map(eb, len);
    let mut seen = vec![false; len];
    let perm = map.iter().all(|&x| x < len && !std::mem::replace(&mut seen[x], true));
    let _ = writeln!(s, "permutation = {perm}");
    print!("{s}");
    Ok(())
}

pub fn kernel(a: KernelArgs) -> CmdResult {
    let spec = ComputeSpec::default();
    let opts = if a.single_accumulator { ScheduleOptions::single_accumulator() } else { ScheduleOptions::default() };
    let s = schedule_kernel_with(a.shape, &spec, opts)?;
    let mut m = RunManifest::new("kernel", 0);
    m.arg("shape", a.shape).arg("check_schedule", a.check_schedule).arg("single_accumulator", a.single_accumulator);
    let hazard = s.hazard(spec.vmac_latency_cycles as u64);
    let body = json!({
        "kernel": {
            "tile": s.tile,
            "accumulators": opts.accumulators,
            "vmacs": s.vmac_count(),
            "nops": s.nop_count(),
            "steady_cycles": s.steady_cycles,
            "preamble_cycles": s.preamble_cycles,
            "postamble_cycles": s.postamble_cycles,
            "tile_pair_cycles": s.tile_pair_cycles(),
            "utilization": s.utilization(),
            "min_dependent_gap_nops": s.min_dependent_gap_nops(),
            "hazards": u8::from(hazard.is_some()),
        }
    });
    let mut text = format!("tile = {}\n", s.tile);
    for k in [
        "accumulators",
        "vmacs",
        "nops",
        "steady_cycles",
        "preamble_cycles",
        "postamble_cycles",
        "tile_pair_cycles",
        "utilization",
        "min_dependent_gap_nops",
        "hazards",
    ] {
        let _ = writeln!(text, "{k} = {}", body["kernel"][k]);
    }
    if a.check_schedule {
        if let Some(op) = hazard {
            return Err(DomainError::new(
                "KernelError::Hazard",
                format!("VMAC at cycle {} reads an accumulator still in flight", op.issue_cycle),
            ));
        }
    }
    emit(a.report.as_deref(), &m, body, &text)
}

fn report_text(r: &SimReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "problem = {}", r.problem);
    let _ = writeln!(s, "padded = {}", r.padded);
    let _ = writeln!(s, "total_cycles = {}", r.total_cycles);
    let _ = writeln!(s, "reconfig_cycles = {}", r.reconfig_cycles);
    let _ = writeln!(s, "first_compute_cycle = {}", r.first_compute_cycle);
    let _ = writeln!(s, "last_compute_cycle = {}", r.last_compute_cycle);
    let _ = writeln!(s, "aggregate_utilization = {:.6}", r.aggregate_utilization);
    let _ = writeln!(s, "steady_state_utilization = {:.6}", r.steady_state_utilization);
    let _ = writeln!(s, "effective_flops = {:.6e}", r.effective_flops);
    let _ = writeln!(s, "peak_flops = {:.6e}", r.peak_flops);
    let b = &r.bytes;
    for (k, v) in [
        ("l3_to_l2_a", b.l3_to_l2_a),
        ("l3_to_l2_b", b.l3_to_l2_b),
        ("l2_to_l1_a", b.l2_to_l1_a),
        ("l2_to_l1_b", b.l2_to_l1_b),
        ("l1_to_l2_c", b.l1_to_l2_c),
        ("l2_to_l3_c", b.l2_to_l3_c),
    ] {
        let _ = writeln!(s, "bytes.{k} = {v}");
    }
    for c in &r.cores {
        let _ = writeln!(s, "core.{}.utilization = {:.6}", c.core, c.utilization);
    }
    s
}

pub fn simulate(a: SimulateArgs) -> CmdResult {
    let mut m = RunManifest::new("simulate", a.seed);
    m.arg("size", a.size).arg("tile", a.tile).arg("seed", a.seed);
    let cost = load_cost(a.cost.as_deref(), &mut m)?;
    let grid = Grid::default();
    let p = tilenpu::plan(a.size, a.tile, &grid)?;
    let (x, y) = random_operands(a.size, a.seed);
    let opts = RunOptions {
        trace: a.trace.is_some(),
        reconfig_cycles: 0,
    };
    let r = run_with(&p, &grid, &x.to_bf16(), &y.to_bf16(), &cost, &opts)?;
    if let Some(t) = &a.trace {
        m.arg("trace", t.display());
        std::fs::write(t, r.trace_text().unwrap_or_default())?;
    }
    let body = json!({ "report": r });
    emit(a.report.as_deref(), &m, body, &report_text(&r))
}

pub fn gemm(a: GemmArgs) -> CmdResult {
    let mut m = RunManifest::new("gemm", a.seed);
    m.arg("backend", a.backend.name()).arg("tile", a.tile).arg("seed", a.seed);
    let cost = load_cost(a.cost.as_deref(), &mut m)?;
    let (x, y) = match (&a.a, &a.b) {
        (Some(pa), Some(pb)) => {
            m.input(pa)?;
            m.input(pb)?;
            m.arg("a", pa.display()).arg("b", pb.display());
            let x = read_matrix(pa)?.into_f32();
            let y = read_matrix(pb)?.into_f32();
            (x, y)
        }
        _ => {
            let size = a.size.ok_or_else(|| DomainError::new("OffloadError::ShapeMismatch", "give --size or both --a and --b"))?;
            random_operands(size, a.seed)
        }
    };
    let size = ProblemSize::new(x.rows(), x.cols(), y.cols());
    m.arg("size", size);
    let grid = Grid::default();
    let mut ctx = OffloadContext::init(&[size], a.tile, grid.clone(), cost, a.backend)?;
    let out = ctx.matmul(GemmRequest::new(&x, &y))?;
    let div = if a.backend == Backend::ReferenceF32 {
        None
    } else {
        let mut reference = OffloadContext::init(&[size], a.tile, grid, cost, Backend::ReferenceF32)?;
        let want = reference.matmul(GemmRequest::new(&x, &y))?.c;
        Some(divergence(size, out.c.data(), want.data()))
    };
    if let Some(o) = &a.out {
        m.arg("out", o.display());
        write_matrix(o, &out.c)?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "size = {size}");
    let _ = writeln!(text, "backend = {}", a.backend.name());
    let t = &out.timings;
    for (k, v) in [
        ("input_copy", t.input_copy),
        ("transpose", t.transpose),
        ("input_sync", t.input_sync),
        ("reconfig", t.reconfig),
        ("kernel", t.kernel),
        ("output_sync", t.output_sync),
        ("output_copy", t.output_copy),
    ] {
        let _ = writeln!(text, "cycles.{k} = {v}");
    }
    let _ = writeln!(text, "cycles.total = {}", t.total());
    if let Some(d) = &div {
        let _ = writeln!(text, "divergence.mean = {:.6e}", d.mean);
        let _ = writeln!(text, "divergence.max = {:.6e}", d.max);
    }
    if let Some(r) = &out.report {
        let _ = writeln!(text, "steady_state_utilization = {:.6}", r.steady_state_utilization);
    }
    let body = json!({
        "size": size,
        "backend": a.backend.name(),
        "timings": out.timings,
        "total_cycles": out.timings.total(),
        "divergence": div,
        "report": out.report,
    });
    emit(a.report.as_deref(), &m, body, &text)
}

pub fn train_toy(a: TrainArgs) -> CmdResult {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            model: ModelConfig::toy(),
            train: Default::default(),
        },
    };
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if let Some(lr) = a.lr {
        run.train.learning_rate = lr;
    }
    if let Some(o) = a.optimizer {
        run.train.optimizer = o;
    }
    let (c, t) = (run.model, run.train);
    let mut m = RunManifest::new("train-toy", t.seed);
    m.arg("backend", a.backend.name())
        .arg("steps", t.steps)
        .arg("seed", t.seed)
        .arg("learning_rate", t.learning_rate)
        .arg("optimizer", format!("{:?}", t.optimizer).to_lowercase());
    if let Some(p) = &a.config {
        m.input(p)?;
        m.arg("config", p.display());
    }
    let corpus = match &a.tokens {
        Some(p) => {
            m.input(p)?;
            m.arg("tokens", p.display());
            data::read_tokens(p)?
        }
        None => data::synthetic_corpus(4 * c.seq_len, c.vocab_size, t.seed),
    };
    let (x, y) = data::batch(&corpus, 0, c.seq_len)?;
    let ctx = OffloadContext::init(&extract_gemm_sizes(&c), TileShape::default(), Grid::default(), CostConfig::default(), a.backend)?;
    let mut model = Gpt2::new(ParamStore::init(&c, t.seed), ctx);
    let mut losses = Vec::with_capacity(t.steps);
    let mut text = String::new();
    for step in 0..t.steps {
        let l = model.train_step(&x, &y, t.learning_rate, t.optimizer, t.weight_decay)?;
        let _ = writeln!(text, "step {step} loss {l:.6}");
        losses.push(l);
    }
    let final_loss = model.forward(&x)?.loss(&y);
    let _ = writeln!(text, "final loss {final_loss:.6}");
    let st = &model.stats;
    let sizes: Vec<Value> = st.per_size.iter().map(|(s, n)| json!({ "size": s, "calls": n })).collect();
    let body = json!({
        "model": c,
        "train": t,
        "backend": a.backend.name(),
        "losses": losses,
        "final_loss": final_loss,
        "gemm": {
            "calls": st.calls,
            "transposed_operands": st.transposed_operands,
            "flops": st.flops,
            "sizes": sizes,
            "timings": st.timings,
            "total_cycles": st.timings.total(),
        },
    });
    emit(a.metrics.as_deref(), &m, body, &text)
}

pub fn flops(a: FlopsArgs) -> CmdResult {
    let mut m = RunManifest::new("flops", 0);
    let c = match &a.config {
        Some(p) => {
            m.input(p)?;
            m.arg("config", p.display());
            RunConfig::load(p)?.model
        }
        None => ModelConfig::gpt2_124m(),
    };
    let l = count_flops(&c);
    let mut text = l.to_text();
    let sizes = extract_gemm_sizes(&c);
    let _ = writeln!(text, "gemm_sizes = {}", sizes.len());
    for s in &sizes {
        let _ = writeln!(text, "  {s}");
    }
    let body = json!({ "ledger": l, "gemm_sizes": sizes });
    emit(a.report.as_deref(), &m, body, &text)
}
