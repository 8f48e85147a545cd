//! Dense row-major grids over the image domain.
//!
//! Every per-pixel quantity in the pipeline (intensities, depths, normals,
//! masks) lives in a [`Grid`]. Indexing is `(x, y)` with `x` the column and
//! `y` the row, matching pixel coordinates `(u, v)`.

/// A dense `width x height` grid stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    /// Builds a grid by evaluating `f(x, y)` at every pixel, row by row.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Reassembles a grid from rows produced independently (e.g. in parallel).
    ///
    /// Panics if the rows are ragged.
    pub fn from_rows(width: usize, rows: Vec<Vec<T>>) -> Self {
        let height = rows.len();
        let mut data = Vec::with_capacity(width * height);
        for row in rows {
            assert_eq!(row.len(), width, "ragged row");
            data.extend(row);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn in_bounds(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Iterates `(x, y, &value)` in row-major order.
    pub fn enumerate(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (i % w, i / w, v))
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| f(v)).collect(),
        }
    }
}

impl Grid<f64> {
    /// Maximum absolute difference over all pixels; grids must match in size.
    pub fn max_abs_diff(&self, other: &Grid<f64>) -> f64 {
        assert!(self.same_size(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-pixel validity mask.
pub type Mask = Grid<bool>;

/// Grayscale intensity image, values nominally in `[0, 1]`.
pub type Image = Grid<f64>;

impl Mask {
    pub fn count_true(&self) -> usize {
        self.data().iter().filter(|&&v| v).count()
    }

    /// Logical AND of two masks of equal size.
    pub fn and(&self, other: &Mask) -> Mask {
        assert!(self.same_size(other));
        Grid::from_vec(
            self.width(),
            self.height(),
            self.data()
                .iter()
                .zip(other.data())
                .map(|(a, b)| *a && *b)
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_layout_is_row_major() {
        let g = Grid::from_fn(3, 2, |x, y| 10 * y + x);
        assert_eq!(*g.get(2, 0), 2);
        assert_eq!(*g.get(0, 1), 10);
        assert_eq!(g.data(), &[0, 1, 2, 10, 11, 12]);
    }

    #[test]
    fn from_rows_matches_from_fn() {
        let rows = vec![vec![0, 1, 2], vec![10, 11, 12]];
        assert_eq!(
            Grid::from_rows(3, rows),
            Grid::from_fn(3, 2, |x, y| (10 * y + x) as i32)
        );
    }

    #[test]
    fn mask_ops() {
        let a = Grid::from_fn(2, 2, |x, _| x == 0);
        let b = Grid::from_fn(2, 2, |_, y| y == 0);
        let c = a.and(&b);
        assert_eq!(c.count_true(), 1);
        assert!(*c.get(0, 0));
    }
}
