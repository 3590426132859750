//! Space-time mesh over `(a,b) x (-A,A) x (0,T)`, node-valued fields and
//! the finite-difference / quadrature operators shared by every stage of the
//! pipeline.
//!
//! Node storage is time-major, row-major in `(k, j, i)`: the value at
//! `(x_i, y_j, t_k)` lives at `(k * (ny + 1) + j) * (nx + 1) + i`.
//!
//! Derivative stencils are second order everywhere: central in the interior,
//! three-point one-sided for first derivatives and four-point one-sided for
//! second derivatives at the ends of each grid line. Every linear operator
//! here has an explicit transpose so the functional gradient can be
//! accumulated in reverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    a: f64,
    b: f64,
    half_width: f64,
    t_final: f64,
    nx: usize,
    ny: usize,
    nt: usize,
    hx: f64,
    hy: f64,
    ht: f64,
}

impl Grid {
    /// Builds a grid on `(a,b) x (-half_width, half_width) x (0, t_final)`
    /// with `nx`, `ny`, `nt` cells per axis. `nt` must be even so that the
    /// snapshot time `T/2` is a node.
    pub fn new(
        a: f64,
        b: f64,
        half_width: f64,
        t_final: f64,
        nx: usize,
        ny: usize,
        nt: usize,
    ) -> Result<Self> {
        let finite = [a, b, half_width, t_final].iter().all(|v| v.is_finite());
        if !finite || a >= b {
            return Err(Error::InvalidGrid(format!("need a < b, got a={a}, b={b}")));
        }
        if half_width <= 0.0 || t_final <= 0.0 {
            return Err(Error::InvalidGrid(format!(
                "extents must be positive (A={half_width}, T={t_final})"
            )));
        }
        if nx < 4 || ny < 4 {
            return Err(Error::InvalidGrid(format!("need nx, ny >= 4, got {nx}x{ny}")));
        }
        if nt < 2 || nt % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "nt must be even and >= 2 so that T/2 is a node, got {nt}"
            )));
        }
        Ok(Self {
            a,
            b,
            half_width,
            t_final,
            nx,
            ny,
            nt,
            hx: (b - a) / nx as f64,
            hy: 2.0 * half_width / ny as f64,
            ht: t_final / nt as f64,
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn half_width(&self) -> f64 {
        self.half_width
    }
    pub fn t_final(&self) -> f64 {
        self.t_final
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn hx(&self) -> f64 {
        self.hx
    }
    pub fn hy(&self) -> f64 {
        self.hy
    }
    pub fn ht(&self) -> f64 {
        self.ht
    }

    pub fn x(&self, i: usize) -> f64 {
        self.a + i as f64 * self.hx
    }
    pub fn y(&self, j: usize) -> f64 {
        -self.half_width + j as f64 * self.hy
    }
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.ht
    }

    /// Time index of the snapshot `t = T/2`.
    pub fn snapshot_index(&self) -> usize {
        self.nt / 2
    }

    pub fn n_space(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }
    pub fn n_nodes(&self) -> usize {
        (self.nt + 1) * self.n_space()
    }

    #[inline]
    pub fn sidx(&self, j: usize, i: usize) -> usize {
        j * (self.nx + 1) + i
    }
    #[inline]
    pub fn idx(&self, k: usize, j: usize, i: usize) -> usize {
        k * self.n_space() + self.sidx(j, i)
    }

    /// Shape of a space-time node array, outermost first.
    pub fn shape(&self) -> [usize; 3] {
        [self.nt + 1, self.ny + 1, self.nx + 1]
    }

    /// Integer strides `(sx, sy, st)` such that every node of `coarse` is a
    /// node of `self`.
    pub fn nesting_strides(&self, coarse: &Grid) -> Result<(usize, usize, usize)> {
        let same = |u: f64, v: f64| (u - v).abs() <= 1e-12 * (1.0 + u.abs().max(v.abs()));
        if !(same(self.a, coarse.a)
            && same(self.b, coarse.b)
            && same(self.half_width, coarse.half_width)
            && same(self.t_final, coarse.t_final))
        {
            return Err(Error::NonNesting("domain extents differ".into()));
        }
        let stride = |fine: usize, c: usize, axis: &str| {
            if c == 0 || fine % c != 0 {
                Err(Error::NonNesting(format!(
                    "{axis}: {fine} cells is not a multiple of {c}"
                )))
            } else {
                Ok(fine / c)
            }
        };
        Ok((
            stride(self.nx, coarse.nx, "x")?,
            stride(self.ny, coarse.ny, "y")?,
            stride(self.nt, coarse.nt, "t")?,
        ))
    }
}

/// One value per space-time node, `(k, j, i)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

/// One value per spatial node, `(j, i)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: *grid,
            values: vec![0.0; grid.n_nodes()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} space-time values, got {}",
                grid.n_nodes(),
                values.len()
            )));
        }
        Ok(Self { grid: *grid, values })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.n_nodes());
        for k in 0..=grid.nt {
            for j in 0..=grid.ny {
                for i in 0..=grid.nx {
                    values.push(f(grid.x(i), grid.y(j), grid.t(k)));
                }
            }
        }
        Self { grid: *grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn at(&self, k: usize, j: usize, i: usize) -> f64 {
        self.values[self.grid.idx(k, j, i)]
    }

    /// Spatial slice at time index `k`.
    pub fn slice(&self, k: usize) -> SpatialField {
        let n = self.grid.n_space();
        SpatialField {
            grid: self.grid,
            values: self.values[k * n..(k + 1) * n].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl SpatialField {
    pub fn zeros(grid: &Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        Self {
            grid: *grid,
            values: vec![value; grid.n_space()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_space() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} spatial values, got {}",
                grid.n_space(),
                values.len()
            )));
        }
        Ok(Self { grid: *grid, values })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.n_space());
        for j in 0..=grid.ny {
            for i in 0..=grid.nx {
                values.push(f(grid.x(i), grid.y(j)));
            }
        }
        Self { grid: *grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn at(&self, j: usize, i: usize) -> f64 {
        self.values[self.grid.sidx(j, i)]
    }

    /// Replicates the field over every time level.
    pub fn broadcast(&self) -> ScalarField {
        let mut values = Vec::with_capacity(self.grid.n_nodes());
        for _ in 0..=self.grid.nt {
            values.extend_from_slice(&self.values);
        }
        ScalarField {
            grid: self.grid,
            values,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A velocity field `q = (q_x, q_y)` given at spatial nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub qx: SpatialField,
    pub qy: SpatialField,
}

impl Velocity {
    pub fn constant(grid: &Grid, qx: f64, qy: f64) -> Self {
        Self {
            qx: SpatialField::constant(grid, qx),
            qy: SpatialField::constant(grid, qy),
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        Self {
            qx: SpatialField::from_fn(grid, |x, y| f(x, y).0),
            qy: SpatialField::from_fn(grid, |x, y| f(x, y).1),
        }
    }
}

/// The four sides of the rectangle. Normal derivatives on each side are
/// taken along the outward normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    /// `y = -A`
    Bottom,
    /// `y = A`
    Top,
    /// `x = a`
    Left,
    /// `x = b`, the sub-boundary carrying Dirichlet data.
    Right,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Bottom, Side::Top, Side::Left, Side::Right];

    /// Number of nodes along this side.
    pub fn len(self, grid: &Grid) -> usize {
        match self {
            Side::Bottom | Side::Top => grid.nx + 1,
            Side::Left | Side::Right => grid.ny + 1,
        }
    }

    /// Coordinates of node `m` along the side.
    pub fn point(self, grid: &Grid, m: usize) -> (f64, f64) {
        match self {
            Side::Bottom => (grid.x(m), -grid.half_width),
            Side::Top => (grid.x(m), grid.half_width),
            Side::Left => (grid.a, grid.y(m)),
            Side::Right => (grid.b, grid.y(m)),
        }
    }

    /// Spatial `(j, i)` of node `m` along the side.
    pub fn node(self, grid: &Grid, m: usize) -> (usize, usize) {
        match self {
            Side::Bottom => (0, m),
            Side::Top => (grid.ny, m),
            Side::Left => (m, 0),
            Side::Right => (m, grid.nx),
        }
    }
}

// ---------------------------------------------------------------------------
// 1-D stencils along one axis of a node array
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Deriv {
    First,
    Second,
}

/// Stencil row at position `i` of a line with last index `n`: returns the
/// first input index and the coefficients (already divided by `h^order`).
#[inline]
fn stencil_row(deriv: Deriv, i: usize, n: usize, h: f64) -> (usize, [f64; 4], usize) {
    match deriv {
        Deriv::First => {
            let s = 0.5 / h;
            if i == 0 {
                (0, [-3.0 * s, 4.0 * s, -s, 0.0], 3)
            } else if i == n {
                (n - 2, [s, -4.0 * s, 3.0 * s, 0.0], 3)
            } else {
                (i - 1, [-s, 0.0, s, 0.0], 3)
            }
        }
        Deriv::Second => {
            let s = 1.0 / (h * h);
            if i == 0 {
                (0, [2.0 * s, -5.0 * s, 4.0 * s, -s], 4)
            } else if i == n {
                (n - 3, [-s, 4.0 * s, -5.0 * s, 2.0 * s], 4)
            } else {
                (i - 1, [s, -2.0 * s, s, 0.0], 3)
            }
        }
    }
}

/// Applies a 1-D derivative stencil along axis `axis` of an array with
/// shape `shape` (outermost first), accumulating `scale * D f` (or
/// `scale * D^T f` when `transpose`) into `out`.
pub(crate) fn stencil_accumulate(
    f: &[f64],
    out: &mut [f64],
    shape: [usize; 3],
    axis: usize,
    deriv: Deriv,
    h: f64,
    scale: f64,
    transpose: bool,
) {
    debug_assert_eq!(f.len(), shape.iter().product::<usize>());
    debug_assert_eq!(out.len(), f.len());
    let n_line = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let last = n_line - 1;
    for o in 0..outer {
        let base = o * n_line * inner;
        for p in 0..n_line {
            let (start, coef, len) = stencil_row(deriv, p, last, h);
            for q in 0..inner {
                let row = base + p * inner + q;
                if transpose {
                    let v = scale * f[row];
                    for (m, c) in coef[..len].iter().enumerate() {
                        out[base + (start + m) * inner + q] += c * v;
                    }
                } else {
                    let mut acc = 0.0;
                    for (m, c) in coef[..len].iter().enumerate() {
                        acc += c * f[base + (start + m) * inner + q];
                    }
                    out[row] += scale * acc;
                }
            }
        }
    }
}

/// Axis positions inside a `(k, j, i)` array.
pub(crate) const AXIS_T: usize = 0;
pub(crate) const AXIS_Y: usize = 1;
pub(crate) const AXIS_X: usize = 2;

fn spatial_shape(grid: &Grid) -> [usize; 3] {
    [1, grid.ny + 1, grid.nx + 1]
}

/// Discrete Laplacian on raw node values of shape `shape` (spatial axes are
/// the last two). Accumulates `scale * lap(f)` or its transpose.
pub(crate) fn laplacian_accumulate(
    grid: &Grid,
    f: &[f64],
    out: &mut [f64],
    shape: [usize; 3],
    scale: f64,
    transpose: bool,
) {
    stencil_accumulate(f, out, shape, AXIS_X, Deriv::Second, grid.hx, scale, transpose);
    stencil_accumulate(f, out, shape, AXIS_Y, Deriv::Second, grid.hy, scale, transpose);
}

/// `div(f q)` on raw node values (space-time or spatial shape). `qx`, `qy`
/// are spatial and broadcast over time.
pub(crate) fn divergence_accumulate(
    grid: &Grid,
    f: &[f64],
    qx: &[f64],
    qy: &[f64],
    out: &mut [f64],
    shape: [usize; 3],
    scale: f64,
    transpose: bool,
) {
    let ns = grid.n_space();
    if transpose {
        // D^T applied first, then multiply by q.
        let mut tx = vec![0.0; f.len()];
        let mut ty = vec![0.0; f.len()];
        stencil_accumulate(f, &mut tx, shape, AXIS_X, Deriv::First, grid.hx, scale, true);
        stencil_accumulate(f, &mut ty, shape, AXIS_Y, Deriv::First, grid.hy, scale, true);
        for (n, o) in out.iter_mut().enumerate() {
            let s = n % ns;
            *o += qx[s] * tx[n] + qy[s] * ty[n];
        }
    } else {
        let fx: Vec<f64> = f.iter().enumerate().map(|(n, v)| v * qx[n % ns]).collect();
        let fy: Vec<f64> = f.iter().enumerate().map(|(n, v)| v * qy[n % ns]).collect();
        stencil_accumulate(&fx, out, shape, AXIS_X, Deriv::First, grid.hx, scale, false);
        stencil_accumulate(&fy, out, shape, AXIS_Y, Deriv::First, grid.hy, scale, false);
    }
}

/// Fields the spatial operators accept.
pub trait NodeField: Sized {
    fn grid(&self) -> &Grid;
    fn values(&self) -> &[f64];
    fn node_shape(&self) -> [usize; 3];
    fn with_values(&self, values: Vec<f64>) -> Self;
}

impl NodeField for ScalarField {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
    fn node_shape(&self) -> [usize; 3] {
        self.grid.shape()
    }
    fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            grid: self.grid,
            values,
        }
    }
}

impl NodeField for SpatialField {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
    fn node_shape(&self) -> [usize; 3] {
        spatial_shape(&self.grid)
    }
    fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            grid: self.grid,
            values,
        }
    }
}

/// Five-point Laplacian; one-sided four-point second differences on the
/// boundary lines.
pub fn laplacian<F: NodeField>(f: &F) -> F {
    let mut out = vec![0.0; f.values().len()];
    laplacian_accumulate(f.grid(), f.values(), &mut out, f.node_shape(), 1.0, false);
    f.with_values(out)
}

/// Central discretization of `div(f q) = d_x(f q_x) + d_y(f q_y)`.
pub fn divergence_of_product<F: NodeField>(f: &F, q: &Velocity) -> F {
    let mut out = vec![0.0; f.values().len()];
    divergence_accumulate(
        f.grid(),
        f.values(),
        q.qx.values(),
        q.qy.values(),
        &mut out,
        f.node_shape(),
        1.0,
        false,
    );
    f.with_values(out)
}

/// First time derivative: central inside, one-sided second order at `t = 0`
/// and `t = T`.
pub fn time_derivative(f: &ScalarField) -> ScalarField {
    let mut out = vec![0.0; f.values.len()];
    stencil_accumulate(
        &f.values,
        &mut out,
        f.grid.shape(),
        AXIS_T,
        Deriv::First,
        f.grid.ht,
        1.0,
        false,
    );
    f.with_values(out)
}

/// Trapezoid-rule `int_{T/2}^{t_k} f dtau` at every node (negative-oriented
/// for `t_k < T/2`).
pub fn volterra_integral(f: &ScalarField) -> ScalarField {
    let mut out = vec![0.0; f.values.len()];
    volterra_apply(&f.grid, &f.values, &mut out);
    f.with_values(out)
}

pub(crate) fn volterra_apply(grid: &Grid, f: &[f64], out: &mut [f64]) {
    let ns = grid.n_space();
    let k0 = grid.snapshot_index();
    let half = 0.5 * grid.ht;
    for s in 0..ns {
        out[k0 * ns + s] = 0.0;
        for k in k0 + 1..=grid.nt {
            out[k * ns + s] = out[(k - 1) * ns + s] + half * (f[(k - 1) * ns + s] + f[k * ns + s]);
        }
        for k in (0..k0).rev() {
            out[k * ns + s] = out[(k + 1) * ns + s] - half * (f[k * ns + s] + f[(k + 1) * ns + s]);
        }
    }
}

/// Accumulates `V^T g` into `out`.
pub(crate) fn volterra_transpose_accumulate(grid: &Grid, g: &[f64], out: &mut [f64]) {
    let ns = grid.n_space();
    let k0 = grid.snapshot_index();
    let nt = grid.nt;
    let half = 0.5 * grid.ht;
    for s in 0..ns {
        // Segment (m-1, m) for m > k0 enters every output k >= m.
        let mut suffix = 0.0;
        for m in (k0 + 1..=nt).rev() {
            suffix += g[m * ns + s];
            out[(m - 1) * ns + s] += half * suffix;
            out[m * ns + s] += half * suffix;
        }
        // Segment (m, m+1) for m < k0 enters every output k <= m with a minus sign.
        let mut prefix = 0.0;
        for m in 0..k0 {
            prefix += g[m * ns + s];
            out[m * ns + s] -= half * prefix;
            out[(m + 1) * ns + s] -= half * prefix;
        }
    }
}

fn trapezoid_factors(n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| if i == 0 || i == n { 0.5 } else { 1.0 })
        .collect()
}

/// Tensor-product trapezoid weights over the space-time nodes.
pub fn quadrature_weights(grid: &Grid) -> ScalarField {
    let cx = trapezoid_factors(grid.nx);
    let cy = trapezoid_factors(grid.ny);
    let ct = trapezoid_factors(grid.nt);
    let cell = grid.hx * grid.hy * grid.ht;
    let mut values = Vec::with_capacity(grid.n_nodes());
    for k in 0..=grid.nt {
        for j in 0..=grid.ny {
            for i in 0..=grid.nx {
                values.push(ct[k] * cy[j] * cx[i] * cell);
            }
        }
    }
    ScalarField {
        grid: *grid,
        values,
    }
}

/// Trapezoid weights over the spatial nodes only.
pub fn spatial_quadrature_weights(grid: &Grid) -> SpatialField {
    let cx = trapezoid_factors(grid.nx);
    let cy = trapezoid_factors(grid.ny);
    let cell = grid.hx * grid.hy;
    let mut values = Vec::with_capacity(grid.n_space());
    for j in 0..=grid.ny {
        for i in 0..=grid.nx {
            values.push(cy[j] * cx[i] * cell);
        }
    }
    SpatialField {
        grid: *grid,
        values,
    }
}
