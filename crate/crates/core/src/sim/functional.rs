//! Untimed evaluation of a plan: every output tile accumulated over its
//! `K/k` tile pairs through the same layout patterns and kernel as the
//! timed simulator, with no scheduling.

use rayon::prelude::*;

use super::{crop_output, prepare_l3, SimError};
use crate::bf16::Bf16;
use crate::kernel::accumulate_micro_tiled;
use crate::layout::{micro_tile_pattern, micro_tile_residue, pair_fixup_in_place, tile_extract_pattern, MicroOperand};
use crate::matrix::Matrix;
use crate::plan::TilingPlan;

pub fn evaluate(plan: &TilingPlan, a: &Matrix<Bf16>, b: &Matrix<Bf16>) -> Result<Matrix<f32>, SimError> {
    let l3 = prepare_l3(plan, a, b)?;
    let (p, t) = (plan.problem, plan.tile);
    let micro_a = micro_tile_pattern(t, MicroOperand::A)?;
    let micro_b = micro_tile_pattern(t, MicroOperand::B)?;
    let residue_b = micro_tile_residue(MicroOperand::B);
    let micro_c_inv = micro_tile_pattern(t, MicroOperand::C)?.invert()?;
    let (tiles_m, tiles_n) = (p.m / t.m, p.n / t.n);

    let tiles: Vec<Result<Vec<f32>, SimError>> = (0..tiles_m * tiles_n)
        .into_par_iter()
        .map(|idx| {
            let (ti, tj) = (idx / tiles_n, idx % tiles_n);
            let mut acc = vec![0f32; t.m * t.n];
            for kb in 0..plan.acc_depth {
                let at = tile_extract_pattern(p.k, t.m, t.k, 2, ti, kb)?.gather(&l3.a)?;
                let bt = tile_extract_pattern(p.k, t.n, t.k, 2, tj, kb)?.gather(&l3.b)?;
                let a1 = micro_a.gather(&at)?;
                let mut b1 = micro_b.gather(&bt)?;
                pair_fixup_in_place(&mut b1, &residue_b);
                accumulate_micro_tiled(t, &a1, &b1, &mut acc)?;
            }
            Ok(micro_c_inv.gather(&acc)?)
        })
        .collect();

    let mut c = vec![0f32; p.m * p.n];
    for (idx, tile) in tiles.into_iter().enumerate() {
        let (ti, tj) = (idx / tiles_n, idx % tiles_n);
        tile_extract_pattern(p.n, t.m, t.n, 4, ti, tj)?.scatter(&tile?, &mut c)?;
    }
    Ok(crop_output(plan, c))
}
