//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tilenpu::gpt2::{count_flops, extract_gemm_sizes, ModelConfig, Optimizer, ParamStore, TrainConfig};
use tilenpu::kernel::{schedule_kernel, schedule_kernel_with, ScheduleOptions};
use tilenpu::layout::operand_path;
use tilenpu::offload::{compare_oracle, random_operands};
use tilenpu::sim::{functional, reconfigure, run};
use tilenpu::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn numeric_fidelity() -> Outcome {
    let t0 = Instant::now();
    let sizes = extract_gemm_sizes(&ModelConfig::gpt2_124m());
    ensure!(sizes.len() == 12, "{} sizes", sizes.len());
    let d = compare_oracle(&sizes, 0, Backend::EmulatedNpu, TileShape::default(), &CostConfig::default()).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let worst_mean = d.iter().map(|x| x.mean).fold(0.0, f64::max);
    let worst_max = d.iter().map(|x| x.max).fold(0.0, f64::max);
    for x in &d {
        ensure!(x.mean < 6e-4, "{}: mean {:.4}%", x.size, x.mean * 100.0);
        ensure!(x.max <= 2e-3, "{}: max {:.4}%", x.size, x.max * 100.0);
    }
    ensure!(secs < 300.0, "took {secs:.0} s");
    Ok(format!(
        "12 sizes, worst mean {:.4}%, worst max {:.4}%, {secs:.1} s",
        worst_mean * 100.0,
        worst_max * 100.0
    ))
}

fn flop_accounting() -> Outcome {
    let c = ModelConfig::gpt2_124m();
    let l = count_flops(&c);
    let g = l.total as f64 / 1e9;
    ensure!((g - 197.0).abs() <= 0.05 * 197.0, "total {g:.2} GFLOP");
    let s = extract_gemm_sizes(&c);
    ensure!(s.len() == 12, "{} distinct sizes", s.len());
    for (m, k, n) in [(256, 768, 2304), (256, 50304, 768), (50304, 256, 768)] {
        ensure!(s.contains(&ProblemSize::new(m, k, n)), "missing {m}x{k}x{n}");
    }
    Ok(format!("{g:.2} GFLOP per step, {} sizes", s.len()))
}

fn padding() -> Outcome {
    let p = plan(ProblemSize::new(50304, 256, 768), TileShape::new(64, 64, 32), &Grid::default()).map_err(|e| e.to_string())?;
    ensure!(p.problem == ProblemSize::new(50432, 256, 768), "padded to {}", p.problem);
    ensure!(p.padding.pad_m == 128 && p.padding.pad_k == 0 && p.padding.pad_n == 0, "{:?}", p.padding);
    Ok(format!("{} -> {}", p.original, p.problem))
}

fn schedule_quality() -> Outcome {
    let spec = ComputeSpec::default();
    let tile = TileShape::new(64, 64, 32);
    let s = schedule_kernel(tile, &spec).map_err(|e| e.to_string())?;
    let want = (64 * 64 * 32 / 128) as u64;
    ensure!(s.nop_count() == 0, "{} steady-state NOPs", s.nop_count());
    ensure!(s.steady_cycles == want && s.vmac_count() as u64 == want, "{} cycles, {} VMACs", s.steady_cycles, s.vmac_count());
    let one = schedule_kernel_with(tile, &spec, ScheduleOptions::single_accumulator()).map_err(|e| e.to_string())?;
    let gap = one.min_dependent_gap_nops().ok_or("no dependent pairs")?;
    ensure!(gap >= 3, "single accumulator gap {gap}");
    Ok(format!("{want} VMAC cycles, 0 NOPs; single accumulator gap {gap} NOPs"))
}

fn oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let grid = Grid::default();
    let cost = CostConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0f64;
    let cases = 100;
    for i in 0..cases {
        let (size, tile) = random_combo(&mut rng, &grid, 512);
        let p = plan(size, tile, &grid).map_err(|e| format!("{size} tile {tile}: {e}"))?;
        let a = random_bf16(size.m, size.k, LayoutTag::RowMajor, &mut rng);
        let b = random_bf16(size.k, size.n, LayoutTag::ColMajor, &mut rng);
        let r = run(&p, &grid, &a, &b, &cost).map_err(|e| format!("{size} tile {tile}: {e}"))?;
        let f = functional::evaluate(&p, &a, &b).map_err(|e| e.to_string())?;
        let bitwise = r.output.data().iter().zip(f.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(bitwise && r.output.len() == f.len(), "case {i}: {size} tile {tile}: simulator and functional differ");
        let ratio = f64_bound_ratio(&a, &b, r.output.data());
        ensure!(ratio <= 1.0, "case {i}: {size} tile {tile}: error at {ratio:.2}x the f32 bound");
        worst = worst.max(ratio);
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 600.0, "took {secs:.0} s");
    Ok(format!("{cases} cases bitwise equal, worst error {worst:.3} of bound, {secs:.1} s"))
}

fn conservation() -> Outcome {
    let grid = Grid::default();
    let cost = CostConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    let fixed = [
        (ProblemSize::new(256, 768, 256), TileShape::new(64, 64, 32)),
        (ProblemSize::new(300, 200, 100), TileShape::new(32, 32, 32)),
    ];
    let random: Vec<_> = (0..20).map(|_| random_combo(&mut rng, &grid, 256)).collect();
    for (size, tile) in fixed.into_iter().chain(random) {
        let p = plan(size, tile, &grid).map_err(|e| e.to_string())?;
        let (m, k, n) = (p.problem.m as u64, p.problem.k as u64, p.problem.n as u64);
        let (tm, tn) = (tile.m as u64, tile.n as u64);
        let a = random_bf16(size.m, size.k, LayoutTag::RowMajor, &mut rng);
        let b = random_bf16(size.k, size.n, LayoutTag::ColMajor, &mut rng);
        let r = run(&p, &grid, &a, &b, &cost).map_err(|e| e.to_string())?;
        let want_a = m * k * 2 * (n / (4 * tn));
        let want_b = k * n * 2 * (m / (4 * tm));
        ensure!(r.bytes.l3_to_l2_a == want_a, "{size} tile {tile}: A {} != {want_a}", r.bytes.l3_to_l2_a);
        ensure!(r.bytes.l3_to_l2_b == want_b, "{size} tile {tile}: B {} != {want_b}", r.bytes.l3_to_l2_b);
        ensure!(r.bytes.l2_to_l3_c == m * n * 4, "{size} tile {tile}: C {} != {}", r.bytes.l2_to_l3_c, m * n * 4);
        checked += 1;
    }
    Ok(format!("{checked} plans exact"))
}

fn reconfiguration() -> Outcome {
    let grid = Grid::default();
    let cost = CostConfig::default();
    let tile = TileShape::default();
    let prev = plan(ProblemSize::new(256, 768, 768), tile, &grid).map_err(|e| e.to_string())?;
    let mut ratios = Vec::new();
    for s in extract_gemm_sizes(&ModelConfig::gpt2_124m()) {
        let next = plan(s, tile, &grid).map_err(|e| e.to_string())?;
        if next.shim_sequences == prev.shim_sequences {
            continue;
        }
        let min = reconfigure(Some(&prev), &next, ReconfigMode::Minimal, &cost).map_err(|e| e.to_string())?;
        let full = reconfigure(Some(&prev), &next, ReconfigMode::Full, &cost).map_err(|e| e.to_string())?;
        ratios.push(full as f64 / min as f64);
    }
    ensure!(!ratios.is_empty(), "no size changes");
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    ensure!(lo >= 3.0, "full/minimal ratio {lo:.2} below 3");
    ensure!(hi <= 3.5 * 1.3, "full/minimal ratio {hi:.2} above the calibration band");

    let size = ProblemSize::new(256, 256, 256);
    let (a, b) = random_operands(size, 3);
    for mode in [ReconfigMode::Minimal, ReconfigMode::Full] {
        let mut ctx = OffloadContext::init(&[size], tile, grid.clone(), cost, Backend::EmulatedNpu).map_err(|e| e.to_string())?;
        ctx.mode = mode;
        let first = ctx.matmul(GemmRequest::new(&a, &b)).map_err(|e| e.to_string())?;
        ensure!(first.timings.reconfig > 0, "{mode:?}: first use cost nothing");
        for _ in 0..3 {
            let again = ctx.matmul(GemmRequest::new(&a, &b)).map_err(|e| e.to_string())?;
            ensure!(again.timings.reconfig == 0, "{mode:?}: repeat cost {}", again.timings.reconfig);
        }
    }
    Ok(format!("full/minimal ratio {lo:.2}..{hi:.2}; repeats free"))
}

fn layout_permutations() -> Outcome {
    let tile = TileShape::new(64, 64, 32);
    let (m, k, n) = (256, 128, 256);
    let mut patterns = 0;
    for (op, rows, cols) in [(MicroOperand::A, m, k), (MicroOperand::B, k, n), (MicroOperand::C, m, n)] {
        let path = operand_path(op, rows, cols, tile).map_err(|e| e.to_string())?;
        let eb = path.elem_bytes();
        let len = path.len();
        let fwd = path.combined();
        let f = fwd.element_map(eb, len);
        let mut seen = vec![false; len];
        for &s in &f {
            ensure!(s < len && !seen[s], "{op:?}: not a permutation");
            seen[s] = true;
        }
        let g = fwd.invert().map_err(|e| e.to_string())?.element_map(eb, len);
        // output i of inverse-after-forward reads forward output g[i], which holds source f[g[i]]
        ensure!((0..len).all(|i| f[g[i]] == i), "{op:?}: inverse after forward is not the identity");
        for stage in &path.stages {
            for p in stage.patterns() {
                ensure!(p.elem_bytes >= 4 && p.elem_bytes % 4 == 0, "{op:?}: {}-byte granule", p.elem_bytes);
                ensure!(p.is_permutation(), "{op:?}: stage pattern not a permutation");
                patterns += 1;
            }
        }
    }
    Ok(format!("A, B, C chains exact; {patterns} DMA patterns at 4-byte granules"))
}

fn training_sanity() -> Outcome {
    let t0 = Instant::now();
    let c = ModelConfig::toy();
    let (x, y) = toy_batch(&c);
    let lr = TrainConfig::default().learning_rate;
    let mut finals = Vec::new();
    for backend in [Backend::ReferenceF32, Backend::EmulatedNpu] {
        let mut m = toy_model(ParamStore::init(&c, 1), backend);
        let first = m.train_step(&x, &y, lr, Optimizer::Sgd, 0.0).map_err(|e| e.to_string())?;
        for _ in 1..50 {
            m.train_step(&x, &y, lr, Optimizer::Sgd, 0.0).map_err(|e| e.to_string())?;
        }
        let last = m.forward(&x).map_err(|e| e.to_string())?.loss(&y);
        ensure!(last < 0.1 * first, "{}: {first:.3} -> {last:.3}", backend.name());
        finals.push((first, last));
    }
    let grads = gradient_check(&c, 1, 100, 1e-4);
    let worst = grads.iter().map(|g| g.rel).fold(0.0, f64::max);
    ensure!(worst < 1e-2, "gradient relative error {worst:e}");

    let a = toy_model(ParamStore::init(&c, 1), Backend::ReferenceF32).forward(&x).map_err(|e| e.to_string())?;
    let t = c.seq_len;
    for la in &a.layers {
        for (r, row) in la.att.chunks(t).enumerate() {
            let sum: f32 = row.iter().sum();
            ensure!((sum - 1.0).abs() <= 1e-5, "attention row sums to {sum}");
            ensure!(row[r % t + 1..].iter().all(|&v| v == 0.0), "future position attended");
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.0} s");
    Ok(format!(
        "loss {:.3} -> {:.3} (reference), {:.3} -> {:.3} (emulated); gradient error {worst:.1e}; {secs:.1} s",
        finals[0].0, finals[0].1, finals[1].0, finals[1].1
    ))
}

fn peak_model() -> Outcome {
    let grid = Grid::default();
    let p = peak_flops(&grid);
    ensure!(p.per_core == 256e9, "per core {}", p.per_core);
    ensure!(p.aggregate == 16.0 * p.per_core, "aggregate {}", p.aggregate);
    ensure!((p.aggregate / 1e12).round() == 4.0, "aggregate {:.3} TFLOP/s", p.aggregate / 1e12);
    let cost = CostConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut best = 0f64;
    let mut runs: Vec<_> = (0..10).map(|_| random_combo(&mut rng, &grid, 384)).collect();
    runs.push((ProblemSize::new(256, 768, 2304), TileShape::default()));
    for (size, tile) in runs {
        let pl = plan(size, tile, &grid).map_err(|e| e.to_string())?;
        let a = random_bf16(size.m, size.k, LayoutTag::RowMajor, &mut rng);
        let b = random_bf16(size.k, size.n, LayoutTag::ColMajor, &mut rng);
        let r = run(&pl, &grid, &a, &b, &cost).map_err(|e| e.to_string())?;
        ensure!(r.effective_flops <= r.peak_flops, "{size}: {} > {}", r.effective_flops, r.peak_flops);
        best = best.max(r.effective_flops / r.peak_flops);
    }
    Ok(format!(
        "{:.0} GFLOP/s per core, {:.3} TFLOP/s aggregate; best simulated {:.1}% of peak",
        p.per_core / 1e9,
        p.aggregate / 1e12,
        best * 100.0
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("numeric fidelity", numeric_fidelity),
        ("flop accounting", flop_accounting),
        ("padding", padding),
        ("schedule quality", schedule_quality),
        ("oracle equivalence", oracle_equivalence),
        ("data-movement conservation", conservation),
        ("reconfiguration model", reconfiguration),
        ("layout permutations", layout_permutations),
        ("training sanity", training_sanity),
        ("peak model", peak_model),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
