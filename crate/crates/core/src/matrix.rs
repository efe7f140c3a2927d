//! Dense 2-D buffers tagged with element type and memory layout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bf16::Bf16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatrixError {
    #[error("buffer holds {got} elements, {rows}x{cols} needs {want}")]
    SizeMismatch {
        rows: usize,
        cols: usize,
        want: usize,
        got: usize,
    },
    #[error("layout {layout:?} does not fit a {rows}x{cols} matrix")]
    BadLayout {
        layout: LayoutTag,
        rows: usize,
        cols: usize,
    },
}

/// Element types understood by the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    Bf16,
}

impl DType {
    /// Code stored in the binary matrix header.
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::Bf16 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::Bf16),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::Bf16 => 2,
        }
    }
}

pub trait Element: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    const BYTES: usize;
    const DTYPE: DType;
    fn to_f32(self) -> f32;
    fn from_f32(x: f32) -> Self;
}

impl Element for f32 {
    const BYTES: usize = 4;
    const DTYPE: DType = DType::F32;
    #[inline]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
}

impl Element for Bf16 {
    const BYTES: usize = 2;
    const DTYPE: DType = DType::Bf16;
    #[inline]
    fn to_f32(self) -> f32 {
        Bf16::to_f32(self)
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        Bf16::from_f32(x)
    }
}

/// Element order inside a 2-D region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    RowMajor,
    ColMajor,
}

/// Memory layout of a matrix buffer.
///
/// `Tiled` stores `tile_rows x tile_cols` tiles contiguously; `order` is used
/// both for the sequence of tiles and for the elements inside each tile, so a
/// column-major tiling of `B` is the row-major tiling of `B^T`.
///
/// `MicroTiled` further splits every tile into contiguous micro-tiles laid
/// out row-of-micro-tiles, each micro-tile row-major. Tiles keep `order`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LayoutTag {
    RowMajor,
    ColMajor,
    Tiled {
        tile_rows: usize,
        tile_cols: usize,
        order: Order,
    },
    MicroTiled {
        tile_rows: usize,
        tile_cols: usize,
        micro_rows: usize,
        micro_cols: usize,
        order: Order,
    },
}

impl LayoutTag {
    pub fn tiled(tile_rows: usize, tile_cols: usize, order: Order) -> Self {
        LayoutTag::Tiled {
            tile_rows,
            tile_cols,
            order,
        }
    }

    pub fn micro_tiled(
        tile_rows: usize,
        tile_cols: usize,
        micro_rows: usize,
        micro_cols: usize,
        order: Order,
    ) -> Self {
        LayoutTag::MicroTiled {
            tile_rows,
            tile_cols,
            micro_rows,
            micro_cols,
            order,
        }
    }

    pub fn fits(&self, rows: usize, cols: usize) -> bool {
        match *self {
            LayoutTag::RowMajor | LayoutTag::ColMajor => true,
            LayoutTag::Tiled {
                tile_rows,
                tile_cols,
                ..
            } => tile_rows > 0 && tile_cols > 0 && rows.is_multiple_of(tile_rows) && cols.is_multiple_of(tile_cols),
            LayoutTag::MicroTiled {
                tile_rows,
                tile_cols,
                micro_rows,
                micro_cols,
                ..
            } => {
                tile_rows > 0
                    && tile_cols > 0
                    && micro_rows > 0
                    && micro_cols > 0
                    && rows.is_multiple_of(tile_rows)
                    && cols.is_multiple_of(tile_cols)
                    && tile_rows % micro_rows == 0
                    && tile_cols % micro_cols == 0
            }
        }
    }

    /// Linear offset of logical element `(r, c)` of a `rows x cols` matrix.
    ///
    /// This is the element-level ground truth the DMA patterns are checked
    /// against; it never goes through an access pattern.
    pub fn offset(&self, rows: usize, cols: usize, r: usize, c: usize) -> usize {
        match *self {
            LayoutTag::RowMajor => r * cols + c,
            LayoutTag::ColMajor => c * rows + r,
            LayoutTag::Tiled {
                tile_rows,
                tile_cols,
                order,
            } => {
                let (tr, tc) = (r / tile_rows, c / tile_cols);
                let (ir, ic) = (r % tile_rows, c % tile_cols);
                let tile_elems = tile_rows * tile_cols;
                match order {
                    Order::RowMajor => {
                        (tr * (cols / tile_cols) + tc) * tile_elems + ir * tile_cols + ic
                    }
                    Order::ColMajor => {
                        (tc * (rows / tile_rows) + tr) * tile_elems + ic * tile_rows + ir
                    }
                }
            }
            LayoutTag::MicroTiled {
                tile_rows,
                tile_cols,
                micro_rows,
                micro_cols,
                order,
            } => {
                let (tr, tc) = (r / tile_rows, c / tile_cols);
                let (ir, ic) = (r % tile_rows, c % tile_cols);
                let tile_elems = tile_rows * tile_cols;
                let tile_index = match order {
                    Order::RowMajor => tr * (cols / tile_cols) + tc,
                    Order::ColMajor => tc * (rows / tile_rows) + tr,
                };
                let (mr, mc) = (ir / micro_rows, ic / micro_cols);
                let micro_index = mr * (tile_cols / micro_cols) + mc;
                let within = (ir % micro_rows) * micro_cols + ic % micro_cols;
                tile_index * tile_elems + micro_index * micro_rows * micro_cols + within
            }
        }
    }
}

/// Dense matrix of `rows x cols` logical elements stored under `layout`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    layout: LayoutTag,
    data: Vec<T>,
}

impl<T> Default for Matrix<T> {
    fn default() -> Self {
        Matrix {
            rows: 0,
            cols: 0,
            layout: LayoutTag::RowMajor,
            data: Vec::new(),
        }
    }
}

impl<T: Element> Matrix<T> {
    pub fn new(rows: usize, cols: usize, layout: LayoutTag, data: Vec<T>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::SizeMismatch {
                rows,
                cols,
                want: rows * cols,
                got: data.len(),
            });
        }
        if !layout.fits(rows, cols) {
            return Err(MatrixError::BadLayout { layout, rows, cols });
        }
        Ok(Matrix {
            rows,
            cols,
            layout,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, layout: LayoutTag) -> Self {
        assert!(layout.fits(rows, cols), "layout {layout:?} does not fit {rows}x{cols}");
        Matrix {
            rows,
            cols,
            layout,
            data: vec![T::default(); rows * cols],
        }
    }

    /// Build a matrix from its logical elements.
    pub fn from_fn(rows: usize, cols: usize, layout: LayoutTag, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols, layout);
        match layout {
            LayoutTag::RowMajor => {
                for r in 0..rows {
                    for c in 0..cols {
                        m.data[r * cols + c] = f(r, c);
                    }
                }
            }
            _ => {
                for r in 0..rows {
                    for c in 0..cols {
                        let o = layout.offset(rows, cols, r, c);
                        m.data[o] = f(r, c);
                    }
                }
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn layout(&self) -> LayoutTag {
        self.layout
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[self.layout.offset(self.rows, self.cols, r, c)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let o = self.layout.offset(self.rows, self.cols, r, c);
        self.data[o] = v;
    }

    /// Replace the layout tag without moving data. Only the shape check is
    /// performed; the caller vouches that the bytes already follow `layout`.
    pub fn retag(mut self, layout: LayoutTag) -> Result<Self, MatrixError> {
        if !layout.fits(self.rows, self.cols) {
            return Err(MatrixError::BadLayout {
                layout,
                rows: self.rows,
                cols: self.cols,
            });
        }
        self.layout = layout;
        Ok(self)
    }

    /// Logical transpose by relabelling: a row-major `r x c` buffer is the
    /// column-major `c x r` buffer of the transpose. `None` for tiled layouts.
    pub fn transposed_view(self) -> Option<Self> {
        let layout = match self.layout {
            LayoutTag::RowMajor => LayoutTag::ColMajor,
            LayoutTag::ColMajor => LayoutTag::RowMajor,
            _ => return None,
        };
        Some(Matrix {
            rows: self.cols,
            cols: self.rows,
            layout,
            data: self.data,
        })
    }

    /// Copy into row-major order (element-wise, any source layout).
    pub fn to_row_major(&self) -> Matrix<T> {
        if self.layout == LayoutTag::RowMajor {
            return self.clone();
        }
        Matrix::from_fn(self.rows, self.cols, LayoutTag::RowMajor, |r, c| self.get(r, c))
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            layout: self.layout,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl Matrix<f32> {
    /// Round every element to bfloat16.
    pub fn to_bf16(&self) -> Matrix<Bf16> {
        self.map(Bf16::from_f32)
    }
}

impl Matrix<Bf16> {
    pub fn to_f32(&self) -> Matrix<f32> {
        self.map(Bf16::to_f32)
    }
}
