use proptest::prelude::*;
use tilenpu::layout::{operand_path, MicroOperand};
use tilenpu::{Bf16, TileShape};

fn tile() -> impl Strategy<Value = TileShape> {
    (1usize..=8, 1usize..=8, 1usize..=8).prop_map(|(m, k, n)| TileShape::new(8 * m, 8 * k, 8 * n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chains_round_trip_data(t in tile(), rb in 1usize..4, cb in 1usize..4, which in 0usize..3) {
        let op = [MicroOperand::A, MicroOperand::B, MicroOperand::C][which];
        let (tr, tc) = op.tile_dims(t);
        let (rows, cols) = (tr * rb, tc * cb);
        let path = operand_path(op, rows, cols, t).unwrap();
        let fwd = path.combined();
        let back = fwd.invert().unwrap();
        let len = rows * cols;
        if op == MicroOperand::C {
            let data: Vec<f32> = (0..len).map(|i| i as f32).collect();
            let moved = fwd.run(&data).unwrap();
            prop_assert_eq!(back.run(&moved).unwrap(), data);
        } else {
            // distinct bf16 values up to 256 positions, then repeated; the
            // element map covers the rest
            let data: Vec<Bf16> = (0..len).map(|i| Bf16::from_f32((i % 256) as f32)).collect();
            let moved = fwd.run(&data).unwrap();
            prop_assert_eq!(back.run(&moved).unwrap(), data);
        }
        let f = fwd.element_map(path.elem_bytes(), len);
        let mut sorted = f.clone();
        sorted.sort_unstable();
        prop_assert!(sorted.iter().enumerate().all(|(i, &v)| i == v));
    }

    #[test]
    fn dma_patterns_use_word_granules(t in tile(), which in 0usize..3) {
        let op = [MicroOperand::A, MicroOperand::B, MicroOperand::C][which];
        let (tr, tc) = op.tile_dims(t);
        let path = operand_path(op, 2 * tr, 2 * tc, t).unwrap();
        for stage in &path.stages {
            for p in stage.patterns() {
                prop_assert!(p.elem_bytes >= 4 && p.elem_bytes % 4 == 0);
                prop_assert!(p.is_permutation());
                prop_assert!(p.descriptors().iter().all(|d| d.dims.len() <= 4));
            }
        }
    }
}
