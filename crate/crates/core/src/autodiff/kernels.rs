//! Dense loops behind the graph ops. All reductions run in a fixed order so
//! forward values are bit-reproducible.

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    mm_acc(a, b, m, k, n, &mut c);
    c
}

/// `c += a · b`.
pub(crate) fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, `c: k×n`.
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

pub(crate) fn fixed_sum(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc + x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn im2col3x3(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * 9 * c];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * 9 * c;
            for k in 0..9 {
                let sy = y as isize + (k / 3) as isize - 1;
                let sx = xx as isize + (k % 3) as isize - 1;
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src = (sy as usize * w + sx as usize) * c;
                out[base + k * c..base + (k + 1) * c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub(crate) fn col2im3x3_acc(g: &[f64], h: usize, w: usize, c: usize, gx: &mut [f64]) {
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * 9 * c;
            for k in 0..9 {
                let sy = y as isize + (k / 3) as isize - 1;
                let sx = xx as isize + (k % 3) as isize - 1;
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let dst = (sy as usize * w + sx as usize) * c;
                for ch in 0..c {
                    gx[dst + ch] += g[base + k * c + ch];
                }
            }
        }
    }
}
