//! Rectangular domains, cell-centered grids, and non-overlapping
//! decompositions into congruent subdomains.
//!
//! Samples live at cell centers `lower + (i + 1/2) h`, so the midpoint rule
//! with a uniform weight `|cell|` is the quadrature everywhere. A
//! subdomain's physical size depends only on the domain and the
//! decomposition grid; the number of samples inside it is whatever the
//! discretization gives.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl Domain {
    pub fn new(lower: [f64; 2], upper: [f64; 2]) -> Result<Self> {
        if !(upper[0] > lower[0] && upper[1] > lower[1]) {
            return Err(Error::Invalid(format!(
                "domain upper {upper:?} must exceed lower {lower:?}"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn unit() -> Self {
        Self {
            lower: [0.0, 0.0],
            upper: [1.0, 1.0],
        }
    }

    pub fn extent(&self) -> [f64; 2] {
        [self.upper[0] - self.lower[0], self.upper[1] - self.lower[1]]
    }

    pub fn area(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1]
    }
}

/// Cell-centered samples of an `R^m`-valued function on a rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteFunction<T> {
    pub domain: Domain,
    /// Cells per axis `(N1, N2)`.
    pub resolution: [usize; 2],
    pub channels: usize,
    /// Shape `(N1, N2, m)`.
    pub values: Tensor<T>,
}

impl<T: Scalar> DiscreteFunction<T> {
    pub fn new(domain: Domain, values: Tensor<T>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 {
            return Err(shape_err("discrete_function", format!("expected (N1, N2, m), got {s:?}")));
        }
        Ok(Self {
            domain,
            resolution: [s[0], s[1]],
            channels: s[2],
            values,
        })
    }

    /// Sample `f(x, y) -> [m values]` at every cell center.
    pub fn from_fn(
        domain: Domain,
        resolution: [usize; 2],
        channels: usize,
        f: impl Fn(f64, f64) -> Vec<f64>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(resolution[0] * resolution[1] * channels);
        for i in 0..resolution[0] {
            for j in 0..resolution[1] {
                let [x, y] = cell_center(&domain, resolution, i, j);
                let v = f(x, y);
                if v.len() != channels {
                    return Err(shape_err("from_fn", format!("closure gave {} channels", v.len())));
                }
                data.extend(v.into_iter().map(T::from_f64_lossy));
            }
        }
        Self::new(domain, Tensor::new(vec![resolution[0], resolution[1], channels], data)?)
    }

    pub fn cell_size(&self) -> [f64; 2] {
        let e = self.domain.extent();
        [e[0] / self.resolution[0] as f64, e[1] / self.resolution[1] as f64]
    }
}

pub fn cell_center(domain: &Domain, resolution: [usize; 2], i: usize, j: usize) -> [f64; 2] {
    let e = domain.extent();
    [
        domain.lower[0] + (i as f64 + 0.5) * e[0] / resolution[0] as f64,
        domain.lower[1] + (j as f64 + 0.5) * e[1] / resolution[1] as f64,
    ]
}

/// `s1 x s2` congruent subdomains, indexed row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub domain: Domain,
    pub grid: [usize; 2],
}

impl Decomposition {
    pub fn new(domain: Domain, grid: [usize; 2]) -> Result<Self> {
        if grid[0] == 0 || grid[1] == 0 {
            return Err(Error::Invalid(format!("decomposition grid {grid:?} must be positive")));
        }
        Ok(Self { domain, grid })
    }

    pub fn len(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col)` of subdomain `i`.
    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.grid[1], i % self.grid[1])
    }

    pub fn subdomain(&self, i: usize) -> Domain {
        let (r, c) = self.position(i);
        let e = self.domain.extent();
        let (h0, h1) = (e[0] / self.grid[0] as f64, e[1] / self.grid[1] as f64);
        let lower = [self.domain.lower[0] + r as f64 * h0, self.domain.lower[1] + c as f64 * h1];
        Domain {
            lower,
            upper: [lower[0] + h0, lower[1] + h1],
        }
    }

    pub fn subdomain_area(&self) -> f64 {
        self.domain.area() / self.len() as f64
    }

    /// Samples per subdomain axis for a given resolution.
    pub fn sub_resolution(&self, resolution: [usize; 2]) -> Result<[usize; 2]> {
        for ax in 0..2 {
            if !resolution[ax].is_multiple_of(self.grid[ax]) {
                return Err(Error::Divisibility {
                    what: format!("resolution axis {ax} vs subdomain grid"),
                    extent: resolution[ax],
                    divisor: self.grid[ax],
                });
            }
        }
        Ok([resolution[0] / self.grid[0], resolution[1] / self.grid[1]])
    }

    /// Midpoint weight `|Omega_i| / (p1 p2)` at a given resolution.
    pub fn cell_weight(&self, resolution: [usize; 2]) -> Result<f64> {
        let p = self.sub_resolution(resolution)?;
        Ok(self.subdomain_area() / (p[0] * p[1]) as f64)
    }
}

/// Flat grid index (`i * N2 + j`) of every (subdomain, local point) pair,
/// subdomains row-major, points row-major inside each subdomain.
pub fn decompose_index(resolution: [usize; 2], grid: [usize; 2]) -> Result<Vec<usize>> {
    let dec = Decomposition::new(Domain::unit(), grid)?;
    let [p1, p2] = dec.sub_resolution(resolution)?;
    let mut idx = Vec::with_capacity(resolution[0] * resolution[1]);
    for r in 0..grid[0] {
        for c in 0..grid[1] {
            for a in 0..p1 {
                for b in 0..p2 {
                    idx.push((r * p1 + a) * resolution[1] + c * p2 + b);
                }
            }
        }
    }
    Ok(idx)
}

/// Flat source index for a cyclic roll: output cell `(i, j)` takes input
/// cell `((i + t1) mod N1, (j + t2) mod N2)`, shifts in cells.
pub fn roll_index(resolution: [usize; 2], cells: [isize; 2]) -> Vec<usize> {
    let [n1, n2] = resolution;
    let t1 = cells[0].rem_euclid(n1 as isize) as usize;
    let t2 = cells[1].rem_euclid(n2 as isize) as usize;
    let mut idx = Vec::with_capacity(n1 * n2);
    for i in 0..n1 {
        for j in 0..n2 {
            idx.push(((i + t1) % n1) * n2 + (j + t2) % n2);
        }
    }
    idx
}

/// A sequence of `s` subdomain blocks, the token sequence of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SubdomainSequence<T> {
    pub decomposition: Decomposition,
    /// Samples per subdomain axis `(p1, p2)`.
    pub sub_resolution: [usize; 2],
    /// Shape `(s, p1 p2, m)`.
    pub values: Tensor<T>,
    pub cell_weight: f64,
}

impl<T: Scalar> SubdomainSequence<T> {
    pub fn len(&self) -> usize {
        self.decomposition.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn points(&self) -> usize {
        self.sub_resolution[0] * self.sub_resolution[1]
    }

    /// Block `i` as a `(p, m)` slice.
    pub fn block(&self, i: usize) -> &[T] {
        let n = self.points() * self.channels();
        &self.values.data()[i * n..(i + 1) * n]
    }

    pub fn resolution(&self) -> [usize; 2] {
        [
            self.sub_resolution[0] * self.decomposition.grid[0],
            self.sub_resolution[1] * self.decomposition.grid[1],
        ]
    }
}

/// Restrict `f` to each subdomain of an `s1 x s2` decomposition.
pub fn decompose<T: Scalar>(f: &DiscreteFunction<T>, grid: [usize; 2]) -> Result<SubdomainSequence<T>> {
    let dec = Decomposition::new(f.domain, grid)?;
    let sub = dec.sub_resolution(f.resolution)?;
    let idx = decompose_index(f.resolution, grid)?;
    let m = f.channels;
    let src = f.values.data();
    let mut data = Vec::with_capacity(src.len());
    for &k in &idx {
        data.extend_from_slice(&src[k * m..(k + 1) * m]);
    }
    Ok(SubdomainSequence {
        decomposition: dec,
        sub_resolution: sub,
        values: Tensor::new(vec![dec.len(), sub[0] * sub[1], m], data)?,
        cell_weight: dec.cell_weight(f.resolution)?,
    })
}

/// Sum of zero extensions of every block back onto the full domain.
pub fn recompose<T: Scalar>(seq: &SubdomainSequence<T>) -> Result<DiscreteFunction<T>> {
    let res = seq.resolution();
    let idx = decompose_index(res, seq.decomposition.grid)?;
    let m = seq.channels();
    let mut out = vec![T::zero(); res[0] * res[1] * m];
    for (r, &k) in idx.iter().enumerate() {
        let src = &seq.values.data()[r * m..(r + 1) * m];
        for (d, &s) in out[k * m..(k + 1) * m].iter_mut().zip(src) {
            *d += s;
        }
    }
    DiscreteFunction::new(seq.decomposition.domain, Tensor::new(vec![res[0], res[1], m], out)?)
}

/// Midpoint-rule `L2` inner product of two `(p, m)` blocks:
/// `cell_weight * sum_points sum_channels a * b`.
pub fn inner_product_l2<T: Scalar>(a: &[T], b: &[T], cell_weight: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("inner_product_l2", format!("{} vs {}", a.len(), b.len())));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum();
    Ok(cell_weight * s)
}

/// Roll `f` cyclically by whole subdomains of an `s1 x s2` decomposition.
pub fn cyclic_shift<T: Scalar>(
    f: &DiscreteFunction<T>,
    shift_subdomains: [isize; 2],
    grid: [usize; 2],
) -> Result<DiscreteFunction<T>> {
    let dec = Decomposition::new(f.domain, grid)?;
    let [p1, p2] = dec.sub_resolution(f.resolution)?;
    let cells = [shift_subdomains[0] * p1 as isize, shift_subdomains[1] * p2 as isize];
    let idx = roll_index(f.resolution, cells);
    let m = f.channels;
    let src = f.values.data();
    let mut data = Vec::with_capacity(src.len());
    for &k in &idx {
        data.extend_from_slice(&src[k * m..(k + 1) * m]);
    }
    DiscreteFunction::new(f.domain, Tensor::new(f.values.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn random_field(res: [usize; 2], m: usize, seed: u64) -> DiscreteFunction<f64> {
        let mut rng = stream(seed, 0);
        DiscreteFunction::new(Domain::unit(), Tensor::uniform(&[res[0], res[1], m], 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn decompose_4x4_into_2x2_blocks_row_major() {
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let f = DiscreteFunction::<f64>::new(Domain::unit(), Tensor::from_f64(&[4, 4, 1], &vals).unwrap()).unwrap();
        let seq = decompose(&f, [2, 2]).unwrap();
        assert_eq!(seq.values.shape(), &[4, 4, 1]);
        assert_eq!(seq.block(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(seq.block(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(seq.block(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(seq.block(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn constant_function_restricts_to_constant_blocks() {
        let f = DiscreteFunction::<f64>::from_fn(Domain::unit(), [12, 8], 2, |_, _| vec![0.7, -2.0]).unwrap();
        let seq = decompose(&f, [3, 4]).unwrap();
        for i in 0..seq.len() {
            for pair in seq.block(i).chunks(2) {
                assert_eq!(pair, &[0.7, -2.0]);
            }
        }
    }

    #[test]
    fn eight_by_eight_grid_on_32_and_128_cells() {
        let f = random_field([32, 32], 1, 1);
        let seq = decompose(&f, [8, 8]).unwrap();
        assert_eq!(seq.len(), 64);
        assert_eq!(seq.sub_resolution, [4, 4]);
        let sd = seq.decomposition.subdomain(9);
        assert_eq!(sd.extent(), [1.0 / 8.0, 1.0 / 8.0]);
        // physical size is independent of resolution
        let fine = decompose(&random_field([128, 128], 1, 1), [8, 8]).unwrap();
        assert_eq!(fine.decomposition.subdomain(9), sd);
        assert_eq!(fine.sub_resolution, [16, 16]);
    }

    #[test]
    fn block_samples_lie_inside_their_subdomain() {
        let res = [12, 6];
        let grid = [3, 2];
        let f = DiscreteFunction::<f64>::from_fn(Domain::unit(), res, 2, |x, y| vec![x, y]).unwrap();
        let seq = decompose(&f, grid).unwrap();
        for i in 0..seq.len() {
            let sd = seq.decomposition.subdomain(i);
            for xy in seq.block(i).chunks(2) {
                assert!(xy[0] > sd.lower[0] && xy[0] < sd.upper[0]);
                assert!(xy[1] > sd.lower[1] && xy[1] < sd.upper[1]);
            }
        }
    }

    #[test]
    fn divisibility_error_names_both_extents() {
        let f = random_field([10, 8], 1, 0);
        let err = decompose(&f, [3, 2]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("10") && msg.contains('3'), "{msg}");
    }

    #[test]
    fn recompose_is_zero_extension() {
        let f = random_field([8, 8], 1, 3);
        let mut seq = decompose(&f, [2, 2]).unwrap();
        let n = seq.points();
        for v in &mut seq.values.data_mut()[n..] {
            *v = 0.0;
        }
        let g = recompose(&seq).unwrap();
        let sd = seq.decomposition.subdomain(0);
        for i in 0..8 {
            for j in 0..8 {
                let [x, y] = cell_center(&f.domain, [8, 8], i, j);
                let v = g.values.data()[i * 8 + j];
                if x < sd.upper[0] && y < sd.upper[1] {
                    assert_eq!(v, f.values.data()[i * 8 + j]);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn recompose_is_linear_over_complementary_masks() {
        let f = random_field([8, 8], 2, 4);
        let seq = decompose(&f, [2, 4]).unwrap();
        let per = seq.points() * seq.channels();
        let (mut a, mut b) = (seq.clone(), seq.clone());
        for i in 0..seq.len() {
            let target = if i % 2 == 0 { &mut a } else { &mut b };
            for v in &mut target.values.data_mut()[i * per..(i + 1) * per] {
                *v = 0.0;
            }
        }
        let (ra, rb) = (recompose(&a).unwrap(), recompose(&b).unwrap());
        let full = recompose(&seq).unwrap();
        for ((x, y), z) in ra.values.data().iter().zip(rb.values.data()).zip(full.values.data()) {
            assert_eq!(x + y, *z);
        }
    }

    #[test]
    fn inner_product_examples() {
        let ones = vec![1.0f64; 16];
        let ip = inner_product_l2(&ones, &ones, (1.0 / 64.0) / 16.0).unwrap();
        assert!((ip - 1.0 / 64.0).abs() < 1e-15);

        // a = b = x on a [0,1]^2 block with p = 32 per axis
        let f = DiscreteFunction::<f64>::from_fn(Domain::unit(), [32, 32], 1, |x, _| vec![x]).unwrap();
        let seq = decompose(&f, [1, 1]).unwrap();
        let v = inner_product_l2(seq.block(0), seq.block(0), seq.cell_weight).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-2);

        assert!(inner_product_l2(&ones, &ones[..3], 1.0).is_err());
    }

    #[test]
    fn inner_product_refinement_order() {
        // a = sin(3x + 1) cos(2y), b = exp(x y) on the subdomain [0, 1/4]^2 of a
        // 4x4 decomposition; reference at p = 256.
        let ip_at = |p: usize| {
            let f = DiscreteFunction::<f64>::from_fn(Domain::unit(), [4 * p, 4 * p], 2, |x, y| {
                vec![(3.0 * x + 1.0).sin() * (2.0 * y).cos(), (x * y).exp()]
            })
            .unwrap();
            let seq = decompose(&f, [4, 4]).unwrap();
            let blk = seq.block(5);
            let a: Vec<f64> = blk.chunks(2).map(|c| c[0]).collect();
            let b: Vec<f64> = blk.chunks(2).map(|c| c[1]).collect();
            inner_product_l2(&a, &b, seq.cell_weight).unwrap()
        };
        let reference = ip_at(256);
        let e8 = (ip_at(8) - reference).abs();
        let e64 = (ip_at(64) - reference).abs();
        let ratio = e64 / e8;
        // second order: refining 8 -> 64 shrinks the error by ~64
        assert!(ratio < 1.0 / 40.0 && ratio > 1.0 / 100.0, "ratio {ratio}");
        let e16 = (ip_at(16) - reference).abs();
        let e32 = (ip_at(32) - reference).abs();
        let order = (e16 / e32).log2();
        assert!(order >= 1.9, "order {order}");
    }

    #[test]
    fn cyclic_shift_identities() {
        let f = random_field([16, 8], 2, 11);
        assert_eq!(cyclic_shift(&f, [0, 0], [4, 2]).unwrap(), f);
        assert_eq!(cyclic_shift(&f, [4, 2], [4, 2]).unwrap(), f);
        let s = cyclic_shift(&f, [2, 2], [4, 2]).unwrap();
        assert_ne!(s, f);
        assert_eq!(cyclic_shift(&s, [-2, -2], [4, 2]).unwrap(), f);
    }

    proptest! {
        #[test]
        fn recompose_inverts_decompose(s1 in 1usize..5, s2 in 1usize..5, p1 in 1usize..5, p2 in 1usize..5, m in 1usize..3, seed in 0u64..1000) {
            let f = random_field([s1 * p1, s2 * p2], m, seed);
            let seq = decompose(&f, [s1, s2]).unwrap();
            prop_assert_eq!(recompose(&seq).unwrap(), f);
        }

        #[test]
        fn inner_product_symmetric_bilinear_positive(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let mut rng = stream(seed, 5);
            let a = Tensor::<f64>::uniform(&[12], 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(&[12], 1.0, &mut rng);
            let c = Tensor::<f64>::uniform(&[12], 1.0, &mut rng);
            let w = 0.01;
            let ab = inner_product_l2(a.data(), b.data(), w).unwrap();
            let ba = inner_product_l2(b.data(), a.data(), w).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            let lin: Vec<f64> = a.data().iter().zip(c.data()).map(|(x, y)| alpha * x + y).collect();
            let lhs = inner_product_l2(&lin, b.data(), w).unwrap();
            let rhs = alpha * ab + inner_product_l2(c.data(), b.data(), w).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
            prop_assert!(inner_product_l2(a.data(), a.data(), w).unwrap() > 0.0);
        }

        #[test]
        fn shift_by_whole_subdomains_permutes_blocks(t1 in -4isize..5, t2 in -3isize..4, seed in 0u64..1000) {
            let grid = [4usize, 3usize];
            let f = random_field([8, 9], 1, seed);
            let shifted = cyclic_shift(&f, [t1, t2], grid).unwrap();
            let a = decompose(&f, grid).unwrap();
            let b = decompose(&shifted, grid).unwrap();
            for i in 0..12 {
                let (r, c) = (i / 3, i % 3);
                let src_r = (r as isize + t1).rem_euclid(4) as usize;
                let src_c = (c as isize + t2).rem_euclid(3) as usize;
                prop_assert_eq!(b.block(i), a.block(src_r * 3 + src_c));
            }
        }
    }
}
