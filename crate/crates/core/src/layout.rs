//! Strided access patterns for the data-layout transformations between the
//! three memory levels.
//!
//! DMA engines move data in 4-byte granules, so a pattern is a list of
//! `(extent, stride)` dimensions counted in granules. bfloat16 data therefore
//! moves in pairs; wherever the target layout separates the two halves of a
//! granule the remainder is fixed by [`byte_pair_fixup`], the software
//! counterpart of the in-core shuffle.
//!
//! Operand paths:
//!
//! * `A`: row-major in L3 -> `m x k` tiles in L2 -> `4 x 8` micro-tiles in L1.
//! * `B`: column-major in L3 -> `k x n` column-major tiles in L2 -> `8 x 4`
//!   row-major micro-tiles in L1 (needs the pair fixup).
//! * `C`: `4 x 4` micro-tiles in L1 -> `m x n` tiles in L2 -> row-major in L3.
//!
//! Micro-tiles inside a tile are laid out row-of-micro-tiles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{Element, LayoutTag, Matrix, Order};
use crate::plan::TileShape;

pub const GRANULE_BYTES: usize = 4;
pub const MAX_DESCRIPTOR_DIMS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("{what} of {bytes} bytes is not a multiple of the {GRANULE_BYTES}-byte DMA granule")]
    MisalignedGranule { what: &'static str, bytes: usize },
    #[error("{what}: {value} is not divisible by {by}")]
    NotDivisible {
        what: &'static str,
        value: usize,
        by: usize,
    },
    #[error("pattern moves {pattern} elements, source has {src}")]
    SizeMismatch { pattern: usize, src: usize },
    #[error("pattern is not a permutation and cannot be inverted")]
    NotInvertible,
    #[error("pattern address {addr} outside a buffer of {len} granules")]
    OutOfBounds { addr: usize, len: usize },
    #[error("transform expects layout {expected:?}, matrix is {found:?}")]
    LayoutMismatch { expected: LayoutTag, found: LayoutTag },
    #[error("{elem_bytes}-byte elements do not pack into {granule_bytes}-byte granules")]
    GranuleMismatch { elem_bytes: usize, granule_bytes: usize },
    #[error("pattern dimensions need a positive extent")]
    ZeroExtent,
    #[error("fixup residue is not a set of disjoint in-range swaps")]
    BadResidue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dim {
    pub extent: usize,
    /// Stride in granules; 0 repeats the same address.
    pub stride: usize,
}

impl Dim {
    pub const fn new(extent: usize, stride: usize) -> Self {
        Dim { extent, stride }
    }
}

/// Gather pattern: output granule `i` is read from source granule
/// `base_offset + sum(idx_d * stride_d)`, where the `idx_d` are the digits of
/// `i` in the mixed radix given by the extents (first dimension outermost).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccessPattern {
    /// Granule size in bytes.
    pub elem_bytes: usize,
    pub dims: Vec<Dim>,
    pub base_offset: usize,
}

impl AccessPattern {
    pub fn new(elem_bytes: usize, dims: Vec<Dim>, base_offset: usize) -> Result<Self, LayoutError> {
        if elem_bytes < GRANULE_BYTES || !elem_bytes.is_multiple_of(GRANULE_BYTES) {
            return Err(LayoutError::MisalignedGranule {
                what: "granule",
                bytes: elem_bytes,
            });
        }
        if dims.iter().any(|d| d.extent == 0) {
            return Err(LayoutError::ZeroExtent);
        }
        Ok(AccessPattern {
            elem_bytes,
            dims,
            base_offset,
        })
    }

    pub fn identity(elem_bytes: usize, granules: usize) -> Result<Self, LayoutError> {
        Self::new(elem_bytes, vec![Dim::new(granules, 1)], 0)
    }

    /// Granules produced.
    pub fn len(&self) -> usize {
        self.dims.iter().map(|d| d.extent).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_bytes(&self) -> usize {
        self.len() * self.elem_bytes
    }

    /// Largest address touched, plus one.
    pub fn span(&self) -> usize {
        self.base_offset + self.dims.iter().map(|d| (d.extent - 1) * d.stride).sum::<usize>() + 1
    }

    /// Every generated source address, in output order.
    pub fn addresses(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        fn walk(dims: &[Dim], base: usize, out: &mut Vec<usize>) {
            match dims.split_first() {
                None => out.push(base),
                Some((d, rest)) => {
                    for i in 0..d.extent {
                        walk(rest, base + i * d.stride, out);
                    }
                }
            }
        }
        walk(&self.dims, self.base_offset, &mut out);
        out
    }

    /// True when the pattern visits each of `0..len()` exactly once. Checked
    /// structurally: the strides, sorted, must form a mixed-radix system.
    pub fn is_permutation(&self) -> bool {
        if self.base_offset != 0 {
            return false;
        }
        let mut dims: Vec<Dim> = self.dims.iter().copied().filter(|d| d.extent > 1).collect();
        dims.sort_by_key(|d| d.stride);
        let mut expect = 1;
        for d in &dims {
            if d.stride != expect {
                return false;
            }
            expect *= d.extent;
        }
        true
    }

    /// Inverse gather of a permutation pattern.
    pub fn invert(&self) -> Result<AccessPattern, LayoutError> {
        if !self.is_permutation() {
            return Err(LayoutError::NotInvertible);
        }
        // output weight of each dimension in the forward pattern
        let mut weights = vec![0usize; self.dims.len()];
        let mut w = 1;
        for (i, d) in self.dims.iter().enumerate().rev() {
            weights[i] = w;
            w *= d.extent;
        }
        let mut inv: Vec<(usize, Dim)> = self
            .dims
            .iter()
            .zip(&weights)
            .filter(|(d, _)| d.extent > 1)
            .map(|(d, &w)| (d.stride, Dim::new(d.extent, w)))
            .collect();
        inv.sort_by(|a, b| b.0.cmp(&a.0));
        let mut dims: Vec<Dim> = inv.into_iter().map(|(_, d)| d).collect();
        if dims.is_empty() {
            dims.push(Dim::new(1, 1));
        }
        AccessPattern::new(self.elem_bytes, dims, 0)
    }

    /// Split into hardware descriptors of at most [`MAX_DESCRIPTOR_DIMS`]
    /// dimensions; outer dimensions beyond that become a chain of
    /// descriptors with shifted base offsets. Running the chain back to
    /// back produces the same stream as the pattern itself.
    pub fn descriptors(&self) -> Vec<AccessPattern> {
        if self.dims.len() <= MAX_DESCRIPTOR_DIMS {
            return vec![self.clone()];
        }
        let split = self.dims.len() - MAX_DESCRIPTOR_DIMS;
        let outer = AccessPattern {
            elem_bytes: self.elem_bytes,
            dims: self.dims[..split].to_vec(),
            base_offset: self.base_offset,
        };
        let inner = self.dims[split..].to_vec();
        outer
            .addresses()
            .into_iter()
            .map(|base| AccessPattern {
                elem_bytes: self.elem_bytes,
                dims: inner.clone(),
                base_offset: base,
            })
            .collect()
    }

    fn elems_per_granule<T: Element>(&self) -> Result<usize, LayoutError> {
        if !self.elem_bytes.is_multiple_of(T::BYTES) {
            return Err(LayoutError::GranuleMismatch {
                elem_bytes: T::BYTES,
                granule_bytes: self.elem_bytes,
            });
        }
        Ok(self.elem_bytes / T::BYTES)
    }

    /// Read `src` through the pattern.
    pub fn gather<T: Element>(&self, src: &[T]) -> Result<Vec<T>, LayoutError> {
        let g = self.elems_per_granule::<T>()?;
        let granules = src.len() / g;
        if !src.len().is_multiple_of(g) || self.span() > granules {
            return Err(LayoutError::OutOfBounds {
                addr: self.span() - 1,
                len: granules,
            });
        }
        let mut out = Vec::with_capacity(self.len() * g);
        gather_rec(&self.dims, self.base_offset, g, src, &mut out);
        Ok(out)
    }

    /// Write `src` (in pattern output order) to the addresses of the pattern
    /// inside `dst`.
    pub fn scatter<T: Element>(&self, src: &[T], dst: &mut [T]) -> Result<(), LayoutError> {
        let g = self.elems_per_granule::<T>()?;
        if src.len() != self.len() * g {
            return Err(LayoutError::SizeMismatch {
                pattern: self.len() * g,
                src: src.len(),
            });
        }
        let granules = dst.len() / g;
        if self.span() > granules {
            return Err(LayoutError::OutOfBounds {
                addr: self.span() - 1,
                len: granules,
            });
        }
        let mut cursor = 0;
        scatter_rec(&self.dims, self.base_offset, g, src, &mut cursor, dst);
        Ok(())
    }

    /// Source element index of every output element, for `elem_bytes`-sized
    /// elements.
    pub fn element_map(&self, elem_bytes: usize) -> Vec<usize> {
        let g = self.elem_bytes / elem_bytes;
        self.addresses()
            .into_iter()
            .flat_map(|a| (0..g).map(move |e| a * g + e))
            .collect()
    }
}

fn gather_rec<T: Copy>(dims: &[Dim], base: usize, g: usize, src: &[T], out: &mut Vec<T>) {
    match dims {
        [] => out.extend_from_slice(&src[base * g..base * g + g]),
        [d] if d.stride == 1 => {
            out.extend_from_slice(&src[base * g..(base + d.extent) * g]);
        }
        [d, rest @ ..] => {
            for i in 0..d.extent {
                gather_rec(rest, base + i * d.stride, g, src, out);
            }
        }
    }
}

fn scatter_rec<T: Copy>(dims: &[Dim], base: usize, g: usize, src: &[T], cursor: &mut usize, dst: &mut [T]) {
    match dims {
        [] => {
            dst[base * g..base * g + g].copy_from_slice(&src[*cursor..*cursor + g]);
            *cursor += g;
        }
        [d] if d.stride == 1 => {
            let n = d.extent * g;
            dst[base * g..base * g + n].copy_from_slice(&src[*cursor..*cursor + n]);
            *cursor += n;
        }
        [d, rest @ ..] => {
            for i in 0..d.extent {
                scatter_rec(rest, base + i * d.stride, g, src, cursor, dst);
            }
        }
    }
}

/// Element swaps left over after a 4-byte-granule pattern, repeated over
/// every `period` consecutive 2-byte elements.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PairResidue {
    pub period: usize,
    pub swaps: Vec<(usize, usize)>,
}

impl PairResidue {
    pub fn none() -> Self {
        PairResidue::default()
    }

    pub fn new(period: usize, swaps: Vec<(usize, usize)>) -> Result<Self, LayoutError> {
        let mut used = vec![false; period];
        for &(a, b) in &swaps {
            if a >= period || b >= period || a == b || used[a] || used[b] {
                return Err(LayoutError::BadResidue);
            }
            used[a] = true;
            used[b] = true;
        }
        Ok(PairResidue { period, swaps })
    }

    pub fn is_noop(&self) -> bool {
        self.swaps.is_empty()
    }

    fn apply<T: Copy>(&self, buf: &mut [T]) {
        if self.is_noop() {
            return;
        }
        for chunk in buf.chunks_exact_mut(self.period) {
            for &(a, b) in &self.swaps {
                chunk.swap(a, b);
            }
        }
    }
}

/// Swap the misplaced 2-byte halves left by a 4-byte DMA pattern. `buffer`
/// holds little-endian 2-byte elements; positions in the residue count
/// elements, not bytes.
pub fn byte_pair_fixup(mut buffer: Vec<u8>, residue: &PairResidue) -> Vec<u8> {
    if residue.is_noop() {
        return buffer;
    }
    assert!(
        buffer.len().is_multiple_of(2 * residue.period),
        "buffer of {} bytes is not a whole number of {}-element periods",
        buffer.len(),
        residue.period
    );
    for chunk in buffer.chunks_exact_mut(2 * residue.period) {
        for &(a, b) in &residue.swaps {
            chunk.swap(2 * a, 2 * b);
            chunk.swap(2 * a + 1, 2 * b + 1);
        }
    }
    buffer
}

/// Element-typed form of [`byte_pair_fixup`].
pub fn pair_fixup_in_place<T: Element>(buffer: &mut [T], residue: &PairResidue) {
    debug_assert!(residue.is_noop() || T::BYTES == 2);
    residue.apply(buffer);
}

/// One step of a layout transformation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    Dma(AccessPattern),
    Fixup(PairResidue),
}

/// A tagged chain of DMA patterns and fixups between two layouts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutTransform {
    pub from: LayoutTag,
    pub to: LayoutTag,
    pub steps: Vec<Step>,
}

impl LayoutTransform {
    pub fn dma(from: LayoutTag, to: LayoutTag, pattern: AccessPattern) -> Self {
        LayoutTransform {
            from,
            to,
            steps: vec![Step::Dma(pattern)],
        }
    }

    pub fn with_fixup(mut self, residue: PairResidue) -> Self {
        if !residue.is_noop() {
            self.steps.push(Step::Fixup(residue));
        }
        self
    }

    pub fn patterns(&self) -> impl Iterator<Item = &AccessPattern> {
        self.steps.iter().filter_map(|s| match s {
            Step::Dma(p) => Some(p),
            Step::Fixup(_) => None,
        })
    }

    pub fn invert(&self) -> Result<LayoutTransform, LayoutError> {
        let steps = self
            .steps
            .iter()
            .rev()
            .map(|s| match s {
                Step::Dma(p) => p.invert().map(Step::Dma),
                Step::Fixup(r) => Ok(Step::Fixup(r.clone())),
            })
            .collect::<Result<_, _>>()?;
        Ok(LayoutTransform {
            from: self.to,
            to: self.from,
            steps,
        })
    }

    pub fn run<T: Element>(&self, data: &[T]) -> Result<Vec<T>, LayoutError> {
        let mut cur = data.to_vec();
        for s in &self.steps {
            match s {
                Step::Dma(p) => cur = p.gather(&cur)?,
                Step::Fixup(r) => pair_fixup_in_place(&mut cur, r),
            }
        }
        Ok(cur)
    }

    /// Source element index of every output element.
    pub fn element_map(&self, elem_bytes: usize, len: usize) -> Vec<usize> {
        let mut map: Vec<usize> = (0..len).collect();
        for s in &self.steps {
            match s {
                Step::Dma(p) => {
                    let m = p.element_map(elem_bytes);
                    map = m.into_iter().map(|i| map[i]).collect();
                }
                Step::Fixup(r) => r.apply(&mut map),
            }
        }
        map
    }

    pub fn dump(&self, elem_bytes: usize, len: usize) -> String {
        let mut s = String::new();
        for (dst, src) in self.element_map(elem_bytes, len).into_iter().enumerate() {
            let _ = writeln!(s, "{src} -> {dst}");
        }
        s
    }
}

/// `apply(pattern, src)`: the whole matrix read through a permutation-sized
/// pattern, tagged `to`.
pub fn apply<T: Element>(pattern: &AccessPattern, src: &Matrix<T>, to: LayoutTag) -> Result<Matrix<T>, LayoutError> {
    let want = pattern.total_bytes() / T::BYTES;
    if want != src.len() {
        return Err(LayoutError::SizeMismatch {
            pattern: want,
            src: src.len(),
        });
    }
    let data = pattern.gather(src.data())?;
    Matrix::new(src.rows(), src.cols(), to, data).map_err(|_| LayoutError::SizeMismatch {
        pattern: want,
        src: src.len(),
    })
}

pub fn invert(pattern: &AccessPattern) -> Result<AccessPattern, LayoutError> {
    pattern.invert()
}

/// Run a tagged transform over a whole matrix.
pub fn apply_transform<T: Element>(t: &LayoutTransform, src: &Matrix<T>) -> Result<Matrix<T>, LayoutError> {
    if src.layout() != t.from {
        return Err(LayoutError::LayoutMismatch {
            expected: t.from,
            found: src.layout(),
        });
    }
    let data = t.run(src.data())?;
    if data.len() != src.len() {
        return Err(LayoutError::SizeMismatch {
            pattern: data.len(),
            src: src.len(),
        });
    }
    Matrix::new(src.rows(), src.cols(), t.to, data).map_err(|_| LayoutError::SizeMismatch {
        pattern: src.len(),
        src: src.len(),
    })
}

fn granules_for(what: &'static str, elems: usize, elem_bytes: usize) -> Result<usize, LayoutError> {
    let bytes = elems * elem_bytes;
    if !bytes.is_multiple_of(GRANULE_BYTES) {
        return Err(LayoutError::MisalignedGranule { what, bytes });
    }
    Ok(bytes / GRANULE_BYTES)
}

fn check_div(what: &'static str, value: usize, by: usize) -> Result<(), LayoutError> {
    if by == 0 || !value.is_multiple_of(by) {
        return Err(LayoutError::NotDivisible { what, value, by });
    }
    Ok(())
}

fn check_elem_bytes(elem_bytes: usize) -> Result<(), LayoutError> {
    if elem_bytes == 0 || !GRANULE_BYTES.is_multiple_of(elem_bytes) {
        return Err(LayoutError::GranuleMismatch {
            elem_bytes,
            granule_bytes: GRANULE_BYTES,
        });
    }
    Ok(())
}

/// Row-major `rows x cols` matrix to `tile_r x tile_c` tiles stored
/// contiguously in row-of-tiles order, each tile row-major.
pub fn tile_pattern(
    rows: usize,
    cols: usize,
    tile_r: usize,
    tile_c: usize,
    elem_bytes: usize,
) -> Result<AccessPattern, LayoutError> {
    check_elem_bytes(elem_bytes)?;
    check_div("rows", rows, tile_r)?;
    check_div("cols", cols, tile_c)?;
    let run = granules_for("tile row", tile_c, elem_bytes)?;
    let row = granules_for("matrix row", cols, elem_bytes)?;
    AccessPattern::new(
        GRANULE_BYTES,
        vec![
            Dim::new(rows / tile_r, tile_r * row),
            Dim::new(cols / tile_c, run),
            Dim::new(tile_r, row),
            Dim::new(run, 1),
        ],
        0,
    )
}

/// Single tile `(row_blk, col_blk)` out of a row-major matrix, as read by a
/// shim DMA.
pub fn tile_extract_pattern(
    cols: usize,
    tile_r: usize,
    tile_c: usize,
    elem_bytes: usize,
    row_blk: usize,
    col_blk: usize,
) -> Result<AccessPattern, LayoutError> {
    check_elem_bytes(elem_bytes)?;
    let run = granules_for("tile row", tile_c, elem_bytes)?;
    let row = granules_for("matrix row", cols, elem_bytes)?;
    AccessPattern::new(
        GRANULE_BYTES,
        vec![Dim::new(tile_r, row), Dim::new(run, 1)],
        row_blk * tile_r * row + col_blk * run,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MicroOperand {
    A,
    B,
    C,
}

impl MicroOperand {
    /// Micro-tile rows, columns and element size in bytes.
    pub fn micro_shape(self) -> (usize, usize, usize) {
        match self {
            MicroOperand::A => (4, 8, 2),
            MicroOperand::B => (8, 4, 2),
            MicroOperand::C => (4, 4, 4),
        }
    }

    /// Tile rows and columns for this operand.
    pub fn tile_dims(self, tile: TileShape) -> (usize, usize) {
        match self {
            MicroOperand::A => (tile.m, tile.k),
            MicroOperand::B => (tile.k, tile.n),
            MicroOperand::C => (tile.m, tile.n),
        }
    }

    /// Layout of a single tile as it sits in L2.
    pub fn tile_layout(self) -> LayoutTag {
        match self {
            MicroOperand::B => LayoutTag::ColMajor,
            _ => LayoutTag::RowMajor,
        }
    }

    /// Layout of a single tile as the kernel consumes it in L1.
    pub fn micro_layout(self, tile: TileShape) -> LayoutTag {
        let (r, c) = self.tile_dims(tile);
        let (mr, mc, _) = self.micro_shape();
        LayoutTag::micro_tiled(r, c, mr, mc, Order::RowMajor)
    }
}

impl std::str::FromStr for MicroOperand {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(MicroOperand::A),
            "B" | "b" => Ok(MicroOperand::B),
            "C" | "c" => Ok(MicroOperand::C),
            _ => Err(format!("unknown operand {s:?}, expected A, B or C")),
        }
    }
}

/// 4-byte-granule pattern turning one L2 tile into its L1 micro-tiled form.
///
/// For `B` the source tile is column-major, so granules hold two vertically
/// adjacent elements; the pattern writes them in the order that leaves only
/// disjoint element swaps for [`micro_tile_residue`].
pub fn micro_tile_pattern(tile: TileShape, operand: MicroOperand) -> Result<AccessPattern, LayoutError> {
    let (rows, cols) = operand.tile_dims(tile);
    let (mr, mc, eb) = operand.micro_shape();
    check_div("tile rows", rows, mr)?;
    check_div("tile cols", cols, mc)?;
    match operand {
        MicroOperand::A | MicroOperand::C => tile_pattern(rows, cols, mr, mc, eb),
        MicroOperand::B => {
            // source granule (kk, kk+1) of column c sits at c * k/2 + kk/2
            let col = granules_for("tile column", rows, eb)?;
            AccessPattern::new(
                GRANULE_BYTES,
                vec![
                    Dim::new(rows / 8, 4),
                    Dim::new(cols / 4, 4 * col),
                    Dim::new(4, 1),
                    Dim::new(2, col),
                    Dim::new(2, 2 * col),
                ],
                0,
            )
        }
    }
}

/// Element swaps completing [`micro_tile_pattern`]. After the DMA each group
/// of eight elements holds two micro-tile rows interleaved as
/// `r0c0 r1c0 r0c2 r1c2 r0c1 r1c1 r0c3 r1c3`; swapping positions 1/4 and
/// 3/6 restores `r0c0..r0c3 r1c0..r1c3`.
pub fn micro_tile_residue(operand: MicroOperand) -> PairResidue {
    match operand {
        MicroOperand::B => PairResidue::new(8, vec![(1, 4), (3, 6)]).expect("static residue"),
        _ => PairResidue::none(),
    }
}

/// L2 tile -> L1 micro-tiles for one tile.
pub fn micro_tile_stage(tile: TileShape, operand: MicroOperand) -> Result<LayoutTransform, LayoutError> {
    let p = micro_tile_pattern(tile, operand)?;
    Ok(LayoutTransform::dma(operand.tile_layout(), operand.micro_layout(tile), p).with_fixup(micro_tile_residue(operand)))
}

/// Repeat a per-tile pattern over `tiles` consecutive tiles of
/// `tile_granules` granules each.
fn per_tile(p: &AccessPattern, tiles: usize, tile_granules: usize) -> Result<AccessPattern, LayoutError> {
    let mut dims = vec![Dim::new(tiles, tile_granules)];
    dims.extend_from_slice(&p.dims);
    AccessPattern::new(p.elem_bytes, dims, p.base_offset)
}

/// Three-level layout chain of one operand over a whole matrix.
#[derive(Debug, Clone)]
pub struct OperandPath {
    pub operand: MicroOperand,
    pub rows: usize,
    pub cols: usize,
    /// In data-flow order: L3 -> L2 -> L1 for inputs, L1 -> L2 -> L3 for `C`.
    pub stages: Vec<LayoutTransform>,
}

impl OperandPath {
    pub fn elem_bytes(&self) -> usize {
        self.operand.micro_shape().2
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whole chain as one transform.
    pub fn combined(&self) -> LayoutTransform {
        LayoutTransform {
            from: self.stages[0].from,
            to: self.stages[self.stages.len() - 1].to,
            steps: self.stages.iter().flat_map(|s| s.steps.iter().cloned()).collect(),
        }
    }
}

/// Layout chain for `operand` of a `rows x cols` matrix tiled by `tile`.
/// `rows x cols` is `M x K` for `A`, `K x N` for `B` and `M x N` for `C`.
pub fn operand_path(operand: MicroOperand, rows: usize, cols: usize, tile: TileShape) -> Result<OperandPath, LayoutError> {
    let (tr, tc) = operand.tile_dims(tile);
    let (mr, mc, eb) = operand.micro_shape();
    check_div("rows", rows, tr)?;
    check_div("cols", cols, tc)?;
    let tiles = (rows / tr) * (cols / tc);
    let tile_granules = granules_for("tile", tr * tc, eb)?;
    let micro = micro_tile_pattern(tile, operand)?;
    let stages = match operand {
        MicroOperand::A => {
            let l2 = LayoutTag::tiled(tr, tc, Order::RowMajor);
            let l1 = LayoutTag::micro_tiled(tr, tc, mr, mc, Order::RowMajor);
            vec![
                LayoutTransform::dma(LayoutTag::RowMajor, l2, tile_pattern(rows, cols, tr, tc, eb)?),
                LayoutTransform::dma(l2, l1, per_tile(&micro, tiles, tile_granules)?),
            ]
        }
        MicroOperand::B => {
            // column-major B is row-major B^T, so tile B^T
            let l2 = LayoutTag::tiled(tr, tc, Order::ColMajor);
            let l1 = LayoutTag::micro_tiled(tr, tc, mr, mc, Order::ColMajor);
            vec![
                LayoutTransform::dma(LayoutTag::ColMajor, l2, tile_pattern(cols, rows, tc, tr, eb)?),
                LayoutTransform::dma(l2, l1, per_tile(&micro, tiles, tile_granules)?).with_fixup(micro_tile_residue(operand)),
            ]
        }
        MicroOperand::C => {
            let l2 = LayoutTag::tiled(tr, tc, Order::RowMajor);
            let l1 = LayoutTag::micro_tiled(tr, tc, mr, mc, Order::RowMajor);
            let to_l1 = per_tile(&micro, tiles, tile_granules)?;
            let to_l2 = tile_pattern(rows, cols, tr, tc, eb)?;
            vec![
                LayoutTransform::dma(l1, l2, to_l1.invert()?),
                LayoutTransform::dma(l2, LayoutTag::RowMajor, to_l2.invert()?),
            ]
        }
    };
    Ok(OperandPath {
        operand,
        rows,
        cols,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bf16::Bf16;

    /// Element-level ground truth: where each output element of a stage
    /// comes from, computed from the layout tags alone.
    fn oracle_map(from: LayoutTag, to: LayoutTag, rows: usize, cols: usize) -> Vec<usize> {
        let mut map = vec![usize::MAX; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                map[to.offset(rows, cols, r, c)] = from.offset(rows, cols, r, c);
            }
        }
        map
    }

    #[test]
    fn single_tile_is_identity() {
        let p = tile_pattern(8, 8, 8, 8, 2).unwrap();
        assert_eq!(p.element_map(2), (0..64).collect::<Vec<_>>());
        let p = tile_pattern(4, 8, 4, 8, 2).unwrap();
        assert_eq!(p.element_map(2), (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn tile_pattern_offsets_128() {
        let p = tile_pattern(128, 128, 64, 64, 2).unwrap();
        let map = p.element_map(2);
        let dst_of = |r: usize, c: usize| map.iter().position(|&s| s == r * 128 + c).unwrap();
        // second tile of the first tile-row starts at 64*64
        assert_eq!(dst_of(0, 64), 64 * 64);
        // first tile of the second tile-row
        assert_eq!(dst_of(64, 0), 2 * 64 * 64);
        assert_eq!(map, oracle_map(LayoutTag::RowMajor, LayoutTag::tiled(64, 64, Order::RowMajor), 128, 128));
    }

    #[test]
    fn tile_pattern_rejects_subgranule_rows() {
        assert!(matches!(tile_pattern(4, 4, 4, 1, 2), Err(LayoutError::MisalignedGranule { .. })));
        assert!(matches!(tile_pattern(4, 6, 4, 4, 2), Err(LayoutError::NotDivisible { .. })));
        assert!(matches!(AccessPattern::new(2, vec![Dim::new(2, 1)], 0), Err(LayoutError::MisalignedGranule { .. })));
    }

    #[test]
    fn micro_a_examples() {
        let t = TileShape::new(4, 8, 4);
        let p = micro_tile_pattern(t, MicroOperand::A).unwrap();
        assert_eq!(p.element_map(2), (0..32).collect::<Vec<_>>());

        let t = TileShape::new(64, 64, 32);
        let map = micro_tile_pattern(t, MicroOperand::A).unwrap().element_map(2);
        let dst_of_08 = map.iter().position(|&s| s == 8).unwrap();
        assert_eq!(dst_of_08, 32);
    }

    #[test]
    fn micro_c_round_trip() {
        let t = TileShape::default();
        let p = micro_tile_pattern(t, MicroOperand::C).unwrap();
        let inv = p.invert().unwrap();
        let src: Vec<f32> = (0..64 * 32).map(|i| i as f32).collect();
        let there = p.gather(&src).unwrap();
        assert_ne!(there, src);
        assert_eq!(inv.gather(&there).unwrap(), src);
    }

    #[test]
    fn micro_b_needs_fixup_and_matches_oracle() {
        let t = TileShape::new(16, 16, 8);
        let stage = micro_tile_stage(t, MicroOperand::B).unwrap();
        assert_eq!(stage.steps.len(), 2);
        let map = stage.element_map(2, 16 * 8);
        assert_eq!(map, oracle_map(LayoutTag::ColMajor, MicroOperand::B.micro_layout(t), 16, 8));
        // without the fixup the DMA alone is not the element permutation
        let dma_only = micro_tile_pattern(t, MicroOperand::B).unwrap().element_map(2);
        assert_ne!(dma_only, map);
    }

    #[test]
    fn fixup_examples() {
        let r = PairResidue::none();
        assert_eq!(byte_pair_fixup(vec![1, 2, 3, 4], &r), vec![1, 2, 3, 4]);
        let r = PairResidue::new(2, vec![(0, 1)]).unwrap();
        assert_eq!(byte_pair_fixup(vec![0xa0, 0xa1, 0xb0, 0xb1], &r), vec![0xb0, 0xb1, 0xa0, 0xa1]);
        assert!(PairResidue::new(4, vec![(0, 1), (1, 2)]).is_err());
        assert!(PairResidue::new(4, vec![(0, 4)]).is_err());
    }

    #[test]
    fn byte_and_element_fixups_agree() {
        let r = micro_tile_residue(MicroOperand::B);
        let elems: Vec<Bf16> = (0..64u16).map(|i| Bf16::from_bits(i * 257 + 3)).collect();
        let bytes: Vec<u8> = elems.iter().flat_map(|e| e.to_bits().to_le_bytes()).collect();
        let mut fixed = elems.clone();
        pair_fixup_in_place(&mut fixed, &r);
        let fixed_bytes: Vec<u8> = fixed.iter().flat_map(|e| e.to_bits().to_le_bytes()).collect();
        assert_eq!(byte_pair_fixup(bytes, &r), fixed_bytes);
    }

    #[test]
    fn full_a_tile_dma_plus_fixup_is_exact() {
        let t = TileShape::default();
        let stage = micro_tile_stage(t, MicroOperand::A).unwrap();
        let map = stage.element_map(2, 64 * 64);
        assert_eq!(map, oracle_map(LayoutTag::RowMajor, MicroOperand::A.micro_layout(t), 64, 64));
    }

    #[test]
    fn repeat_pattern_is_not_invertible() {
        let p = AccessPattern::new(4, vec![Dim::new(4, 0), Dim::new(4, 1)], 0).unwrap();
        assert_eq!(p.invert(), Err(LayoutError::NotInvertible));
        let p = AccessPattern::new(4, vec![Dim::new(4, 1)], 2).unwrap();
        assert_eq!(p.invert(), Err(LayoutError::NotInvertible));
    }

    #[test]
    fn apply_identity_and_size_mismatch() {
        let m = Matrix::from_fn(4, 8, LayoutTag::RowMajor, |r, c| Bf16::from_f32((r * 8 + c) as f32));
        let id = AccessPattern::identity(4, 16).unwrap();
        assert_eq!(apply(&id, &m, LayoutTag::RowMajor).unwrap(), m);
        let short = AccessPattern::identity(4, 8).unwrap();
        assert!(matches!(apply(&short, &m, LayoutTag::RowMajor), Err(LayoutError::SizeMismatch { .. })));
    }

    #[test]
    fn transform_checks_source_tag() {
        let t = TileShape::new(8, 8, 8);
        let stage = micro_tile_stage(t, MicroOperand::B).unwrap();
        let m = Matrix::<Bf16>::zeros(8, 8, LayoutTag::RowMajor);
        assert!(matches!(apply_transform(&stage, &m), Err(LayoutError::LayoutMismatch { .. })));
    }

    #[test]
    fn descriptors_respect_dim_limit() {
        let t = TileShape::default();
        let p = micro_tile_pattern(t, MicroOperand::B).unwrap();
        assert_eq!(p.dims.len(), 5);
        let chain = p.descriptors();
        assert_eq!(chain.len(), 64 / 8);
        let mut flat = Vec::new();
        for d in &chain {
            assert!(d.dims.len() <= MAX_DESCRIPTOR_DIMS);
            flat.extend(d.addresses());
        }
        assert_eq!(flat, p.addresses());
    }

    #[test]
    fn scatter_inverts_gather_for_extraction() {
        let src: Vec<f32> = (0..8 * 16).map(|i| i as f32).collect();
        let p = tile_extract_pattern(16, 4, 4, 4, 1, 2).unwrap();
        let tile = p.gather(&src).unwrap();
        assert_eq!(tile[0], (4 * 16 + 8) as f32);
        let mut dst = vec![0.0f32; src.len()];
        p.scatter(&tile, &mut dst).unwrap();
        for (i, (&d, &s)) in dst.iter().zip(&src).enumerate() {
            let (r, c) = (i / 16, i % 16);
            if (4..8).contains(&r) && (8..12).contains(&c) {
                assert_eq!(d, s);
            } else {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn gather_out_of_bounds() {
        let p = AccessPattern::new(4, vec![Dim::new(4, 2)], 0).unwrap();
        assert!(matches!(p.gather(&[0.0f32; 4]), Err(LayoutError::OutOfBounds { .. })));
    }
}
