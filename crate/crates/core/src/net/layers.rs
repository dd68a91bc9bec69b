//! Planar (channel, row, column) tensor kernels: convolution through im2col
//! and GEMM, 2× average pooling, 2× nearest upsampling.

/// `c = a · b + beta · c` for row-major-with-strides operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution geometry; weights are `[cout][cin·k·k]` followed by `cout` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub offset: usize,
}

impl Conv {
    pub fn weight_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.cout
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let p = &params[self.offset..self.offset + self.param_count()];
        p.split_at(self.weight_count())
    }

    /// Zero-padded "same" im2col: rows `ci·k² + ky·k + kx`, columns pixels.
    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (k, r) = (self.k, (self.k / 2) as isize);
        let hw = h * w;
        let mut col = vec![0.0; self.fan_in() * hw];
        for ci in 0..self.cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                    let (dy, dx) = (ky as isize - r, kx as isize - r);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        let dst = &mut row[y * w..][..w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        for xx in x0..x1 {
                            dst[xx] = src[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (k, r) = (self.k, (self.k / 2) as isize);
        let hw = h * w;
        let mut x = vec![0.0; self.cin * hw];
        for ci in 0..self.cin {
            let plane = &mut x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                    let (dy, dx) = (ky as isize - r, kx as isize - r);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[y * w..][..w];
                        let dst = &mut plane[sy as usize * w..][..w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        for xx in x0..x1 {
                            dst[(xx as isize + dx) as usize] += src[xx];
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, params: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let (wt, bias) = self.split(params);
        let mut y = vec![0.0; self.cout * hw];
        for (co, b) in bias.iter().enumerate() {
            y[co * hw..(co + 1) * hw].fill(*b);
        }
        let fan = self.fan_in();
        if self.k == 1 {
            gemm(self.cout, fan, hw, wt, (fan, 1), x, (hw, 1), 1.0, &mut y);
        } else {
            let col = self.im2col(x, h, w);
            gemm(self.cout, fan, hw, wt, (fan, 1), &col, (hw, 1), 1.0, &mut y);
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_dx`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        h: usize,
        w: usize,
        dy: &[f64],
        grad: &mut [f64],
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let hw = h * w;
        let fan = self.fan_in();
        let (wt, _) = self.split(params);
        let g = &mut grad[self.offset..self.offset + self.param_count()];
        let (gw, gb) = g.split_at_mut(self.weight_count());
        for (co, b) in gb.iter_mut().enumerate() {
            *b += dy[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
        let col_owned;
        let col: &[f64] = if self.k == 1 {
            x
        } else {
            col_owned = self.im2col(x, h, w);
            &col_owned
        };
        // dW[cout][fan] += dy[cout][hw] · colᵀ[hw][fan]
        gemm(self.cout, hw, fan, dy, (hw, 1), col, (1, hw), 1.0, gw);
        if !need_dx {
            return None;
        }
        // dcol[fan][hw] = Wᵀ[fan][cout] · dy[cout][hw]
        let mut dcol = vec![0.0; fan * hw];
        gemm(
            fan,
            self.cout,
            hw,
            wt,
            (1, fan),
            dy,
            (hw, 1),
            0.0,
            &mut dcol,
        );
        Some(if self.k == 1 {
            dcol
        } else {
            self.col2im(&dcol, h, w)
        })
    }
}

pub(crate) fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..];
        let dst = &mut y[ch * oh * ow..];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = 0.25 * (a + b);
            }
        }
    }
    y
}

pub(crate) fn avg_pool2_backward(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                dx[ch * h * w + y * w + x] = 0.25 * dy[ch * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
    dx
}

/// 2× nearest-neighbor upsample of an `h × w` tensor.
pub(crate) fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                y[ch * oh * ow + i * ow + j] = x[ch * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    y
}

/// Backward of [`upsample2`]; `h × w` is the low-resolution size.
pub(crate) fn upsample2_backward(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                dx[ch * h * w + (i / 2) * w + j / 2] += dy[ch * oh * ow + i * ow + j];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive_conv(c: &Conv, params: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let r = (c.k / 2) as isize;
        let mut y = vec![0.0; c.cout * h * w];
        for co in 0..c.cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = params[c.offset + c.weight_count() + co];
                    for ci in 0..c.cin {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let (yy, xx) =
                                    (i as isize + ky as isize - r, j as isize + kx as isize - r);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let wt =
                                    params[c.offset + co * c.fan_in() + (ci * c.k + ky) * c.k + kx];
                                acc += wt * x[ci * h * w + yy as usize * w + xx as usize];
                            }
                        }
                    }
                    y[co * h * w + i * w + j] = acc;
                }
            }
        }
        y
    }

    fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let c = Conv {
                cin: 3,
                cout: 4,
                k,
                offset: 5,
            };
            let params = random_vec(5 + c.param_count(), &mut rng);
            let x = random_vec(3 * 5 * 7, &mut rng);
            let a = c.forward(&params, &x, 5, 7);
            let b = naive_conv(&c, &params, &x, 5, 7);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, J·dθ> = <Jᵀdy, dθ> for the (linear) convolution map.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3] {
            let c = Conv {
                cin: 2,
                cout: 3,
                k,
                offset: 0,
            };
            let (h, w) = (4, 6);
            let params = random_vec(c.param_count(), &mut rng);
            let x = random_vec(c.cin * h * w, &mut rng);
            let dy = random_vec(c.cout * h * w, &mut rng);
            let mut grad = vec![0.0; c.param_count()];
            let dx = c.backward(&params, &x, h, w, &dy, &mut grad, true).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            // Input direction.
            let v = random_vec(x.len(), &mut rng);
            let zero_bias: Vec<f64> = params
                .iter()
                .enumerate()
                .map(|(i, p)| if i >= c.weight_count() { 0.0 } else { *p })
                .collect();
            let jv = c.forward(&zero_bias, &v, h, w);
            assert!((dot(&dy, &jv) - dot(&dx, &v)).abs() < 1e-10);
            // Parameter direction.
            let t = random_vec(params.len(), &mut rng);
            let jt = c.forward(&t, &x, h, w);
            assert!((dot(&dy, &jt) - dot(&grad, &t)).abs() < 1e-10);
        }
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (2, 4, 6);
        let x = random_vec(c * h * w, &mut rng);
        let dy = random_vec(c * h * w / 4, &mut rng);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        assert!(
            (dot(&avg_pool2(&x, c, h, w), &dy) - dot(&x, &avg_pool2_backward(&dy, c, h, w))).abs()
                < 1e-12
        );
        let lo = random_vec(c * h * w / 4, &mut rng);
        let hi = random_vec(c * h * w, &mut rng);
        assert!(
            (dot(&upsample2(&lo, c, h / 2, w / 2), &hi)
                - dot(&lo, &upsample2_backward(&hi, c, h / 2, w / 2)))
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn pool_of_constant() {
        let x = vec![0.7; 16];
        assert!(avg_pool2(&x, 1, 4, 4)
            .iter()
            .all(|v| (v - 0.7).abs() < 1e-15));
    }
}
