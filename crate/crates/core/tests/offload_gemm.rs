use tilenpu::kernel::f64_gemm;
use tilenpu::offload::io::{read_matrix, write_matrix, AnyMatrix};
use tilenpu::offload::{compare_oracle, random_operands};
use tilenpu::{Backend, CostConfig, GemmRequest, Grid, LayoutTag, Matrix, OffloadContext, ProblemSize, ReconfigMode, TileShape};

fn ctx(backend: Backend) -> OffloadContext {
    OffloadContext::init(&[], TileShape::default(), Grid::default(), CostConfig::default(), backend).unwrap()
}

fn filled(rows: usize, cols: usize, layout: LayoutTag, salt: usize) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, layout, |r, c| ((r * 31 + c * 17 + salt) % 23) as f32 / 23.0 - 0.4)
}

#[test]
fn every_operand_orientation_matches_f64() {
    let (m, k, n) = (70, 50, 90);
    for backend in [Backend::ReferenceF32, Backend::EmulatedNpu] {
        let mut cx = ctx(backend);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            for (la, lb) in [(LayoutTag::RowMajor, LayoutTag::ColMajor), (LayoutTag::ColMajor, LayoutTag::RowMajor)] {
                let a = if ta { filled(k, m, la, 1) } else { filled(m, k, la, 1) };
                let b = if tb { filled(n, k, lb, 2) } else { filled(k, n, lb, 2) };
                let out = cx
                    .matmul(GemmRequest {
                        a: &a,
                        b: &b,
                        transpose_a: ta,
                        transpose_b: tb,
                    })
                    .unwrap();
                let opa: Vec<f32> = (0..m * k).map(|i| if ta { a.get(i % k, i / k) } else { a.get(i / k, i % k) }).collect();
                let opb: Vec<f32> = (0..k * n).map(|i| if tb { b.get(i % n, i / n) } else { b.get(i / n, i % n) }).collect();
                let want = f64_gemm(m, k, n, &opa, &opb);
                let (rows, cols) = (out.c.rows(), out.c.cols());
                assert_eq!((rows, cols), (m, n));
                for i in 0..m {
                    for j in 0..n {
                        let d = (out.c.get(i, j) as f64 - want[i * n + j]).abs();
                        // bf16 inputs keep 8 significant bits
                        assert!(d < 0.05, "{backend:?} {ta} {tb} {la:?}: ({i},{j}) off by {d}");
                    }
                }
            }
        }
    }
}

#[test]
fn small_sizes_stay_within_fidelity_bounds() {
    let sizes = [ProblemSize::new(256, 256, 256), ProblemSize::new(100, 300, 200), ProblemSize::new(512, 64, 128)];
    let d = compare_oracle(&sizes, 11, Backend::EmulatedNpu, TileShape::default(), &CostConfig::default()).unwrap();
    for x in d {
        assert!(x.mean < 6e-4 && x.max < 2e-3, "{x:?}");
    }
}

#[test]
fn reconfiguration_is_charged_on_size_changes_only() {
    let mut cx = ctx(Backend::EmulatedNpu);
    let s1 = ProblemSize::new(128, 128, 128);
    let s2 = ProblemSize::new(256, 128, 128);
    let (a1, b1) = random_operands(s1, 1);
    let (a2, b2) = random_operands(s2, 2);
    let mut charges = Vec::new();
    for (a, b) in [(&a1, &b1), (&a1, &b1), (&a2, &b2), (&a2, &b2), (&a1, &b1)] {
        charges.push(cx.matmul(GemmRequest::new(a, b)).unwrap().timings.reconfig);
    }
    assert!(charges[0] > 0 && charges[2] > 0 && charges[4] > 0);
    assert_eq!((charges[1], charges[3]), (0, 0));
    assert_eq!(cx.plans_built(), 2);

    cx.mode = ReconfigMode::Full;
    let full = cx.matmul(GemmRequest::new(&a2, &b2)).unwrap().timings.reconfig;
    assert!(full as f64 >= 3.0 * charges[2] as f64);
}

#[test]
fn matrix_files_round_trip() {
    let dir = std::env::temp_dir().join(format!("offload-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("a.mat");
    let m = filled(5, 7, LayoutTag::ColMajor, 3);
    write_matrix(&path, &m).unwrap();
    match read_matrix(&path).unwrap() {
        // files are always row-major
        AnyMatrix::F32(back) => assert_eq!(back, m.to_row_major()),
        other => panic!("wrong dtype {:?}", other.dtype()),
    }
    std::fs::remove_dir_all(dir).unwrap();
}
