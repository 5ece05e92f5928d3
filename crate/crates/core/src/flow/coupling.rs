//! Affine coupling layer with an MLP conditioner and hand-written backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::params::{Block, LayerLayout};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Base space to data space, `out = y * exp(s) + m`.
    Forward,
    /// Data space to base space, `out = (y - m) * exp(-s)`.
    Inverse,
}

/// Cached activations of one layer for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape<T> {
    cond: Array2<T>,
    h1: Array2<T>,
    h2: Array2<T>,
    s: Array2<T>,
    m: Array2<T>,
    out: Array2<T>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingLayer {
    /// Coordinates fed to the conditioner (mask = 1); passed through unchanged.
    pub cond_idx: Vec<usize>,
    /// Coordinates transformed by the layer (mask = 0).
    pub trans_idx: Vec<usize>,
    pub layout: LayerLayout,
}

fn view<T>(p: &[T], shape: (usize, usize)) -> ArrayView2<'_, T> {
    ArrayView2::from_shape(shape, p).expect("layout shape matches block length")
}

fn view_mut<T>(p: &mut [T], shape: (usize, usize)) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape(shape, p).expect("layout shape matches block length")
}

impl CouplingLayer {
    /// Alternating mask: layer `l` transforms coordinate `j` iff `(j + l)` is odd.
    pub fn alternating(layer: usize, dim: usize, hidden: usize, start: usize) -> Self {
        let (trans_idx, cond_idx): (Vec<usize>, Vec<usize>) =
            (0..dim).partition(|j| (j + layer) % 2 == 1);
        let layout = LayerLayout::new(start, cond_idx.len(), trans_idx.len(), hidden);
        Self {
            cond_idx,
            trans_idx,
            layout,
        }
    }

    pub fn mask(&self, dim: usize) -> Vec<u8> {
        (0..dim).map(|j| u8::from(self.cond_idx.contains(&j))).collect()
    }

    fn block<'a, T>(&self, params: &'a [T], b: Block) -> ArrayView2<'a, T> {
        view(&params[self.layout.range(b)], self.layout.shape(b))
    }

    /// Conditioner MLP: returns (h1, h2, s, m).
    fn conditioner<T: Scalar>(
        &self,
        params: &[T],
        cond: &Array2<T>,
        clamp: T,
    ) -> (Array2<T>, Array2<T>, Array2<T>, Array2<T>) {
        let n_out = self.layout.n_out;
        let mut h1 = cond.dot(&self.block(params, Block::W1));
        h1 += &self.block(params, Block::B1);
        T::tanh_in_place(h1.as_slice_mut().expect("standard layout"));
        let mut h2 = h1.dot(&self.block(params, Block::W2));
        h2 += &self.block(params, Block::B2);
        T::tanh_in_place(h2.as_slice_mut().expect("standard layout"));
        let mut o = h2.dot(&self.block(params, Block::W3));
        o += &self.block(params, Block::B3);
        let mut s = o.slice(ndarray::s![.., ..n_out]).to_owned();
        s.mapv_inplace(|v| clamp * v.tanh());
        let m = o.slice(ndarray::s![.., n_out..]).to_owned();
        (h1, h2, s, m)
    }

    /// Transforms `y` in place and adds the layer log-det to `logdet`.
    pub(crate) fn apply<T: Scalar>(
        &self,
        params: &[T],
        clamp: T,
        y: &mut Array2<T>,
        logdet: &mut [T],
        dir: Direction,
        keep_tape: bool,
    ) -> Option<LayerTape<T>> {
        let cond = y.select(Axis(1), &self.cond_idx);
        let yt = y.select(Axis(1), &self.trans_idx);
        let (h1, h2, s, m) = self.conditioner(params, &cond, clamp);
        let mut out = Array2::zeros(yt.raw_dim());
        match dir {
            Direction::Forward => Zip::from(&mut out)
                .and(&yt)
                .and(&s)
                .and(&m)
                .for_each(|o, &y, &s, &m| *o = y * s.exp() + m),
            Direction::Inverse => Zip::from(&mut out)
                .and(&yt)
                .and(&s)
                .and(&m)
                .for_each(|o, &y, &s, &m| *o = (y - m) * (-s).exp()),
        }
        let sign = match dir {
            Direction::Forward => T::one(),
            Direction::Inverse => -T::one(),
        };
        for (ld, row) in logdet.iter_mut().zip(s.rows()) {
            *ld += sign * row.sum();
        }
        for (k, &j) in self.trans_idx.iter().enumerate() {
            y.column_mut(j).assign(&out.column(k));
        }
        keep_tape.then_some(LayerTape {
            cond,
            h1,
            h2,
            s,
            m,
            out,
        })
    }

    /// Back-propagates through one layer.
    ///
    /// On entry `g` holds dL/d(layer output); on exit it holds dL/d(layer input).
    /// `g_logdet` is dL/d(log-det contribution) per sample. Parameter gradients
    /// are accumulated into `grad`.
    pub(crate) fn backward<T: Scalar>(
        &self,
        params: &[T],
        clamp: T,
        tape: &LayerTape<T>,
        g: &mut Array2<T>,
        g_logdet: &[T],
        dir: Direction,
        grad: &mut [T],
    ) {
        let n_out = self.layout.n_out;
        let batch = g.nrows();
        let gt = g.select(Axis(1), &self.trans_idx);
        let mut dy = Array2::zeros(gt.raw_dim());
        let mut d_o = Array2::zeros((batch, 2 * n_out));
        {
            let (mut d_s, mut d_m) = d_o.view_mut().split_at(Axis(1), n_out);
            for b in 0..batch {
                let gl = g_logdet[b];
                for k in 0..n_out {
                    let gv = gt[[b, k]];
                    let s = tape.s[[b, k]];
                    let out = tape.out[[b, k]];
                    let ds = match dir {
                        Direction::Forward => {
                            dy[[b, k]] = gv * s.exp();
                            d_m[[b, k]] = gv;
                            gv * (out - tape.m[[b, k]]) + gl
                        }
                        Direction::Inverse => {
                            let e = gv * (-s).exp();
                            dy[[b, k]] = e;
                            d_m[[b, k]] = -e;
                            -gv * out - gl
                        }
                    };
                    d_s[[b, k]] = ds * (clamp - s * s / clamp);
                }
            }
        }

        let lay = &self.layout;
        let w1 = self.block(params, Block::W1);
        let w2 = self.block(params, Block::W2);
        let w3 = self.block(params, Block::W3);

        accumulate_matmul(grad, lay, Block::W3, tape.h2.t(), d_o.view());
        accumulate_bias(grad, lay, Block::B3, &d_o);
        let mut d_a2 = d_o.dot(&w3.t());
        Zip::from(&mut d_a2)
            .and(&tape.h2)
            .for_each(|d, &h| *d *= T::one() - h * h);

        accumulate_matmul(grad, lay, Block::W2, tape.h1.t(), d_a2.view());
        accumulate_bias(grad, lay, Block::B2, &d_a2);
        let mut d_a1 = d_a2.dot(&w2.t());
        Zip::from(&mut d_a1)
            .and(&tape.h1)
            .for_each(|d, &h| *d *= T::one() - h * h);

        accumulate_matmul(grad, lay, Block::W1, tape.cond.t(), d_a1.view());
        accumulate_bias(grad, lay, Block::B1, &d_a1);
        let d_cond = d_a1.dot(&w1.t());

        for (k, &j) in self.trans_idx.iter().enumerate() {
            g.column_mut(j).assign(&dy.column(k));
        }
        for (k, &j) in self.cond_idx.iter().enumerate() {
            let mut col = g.column_mut(j);
            col += &d_cond.column(k);
        }
    }
}

/// `grad[block] += a · rhs`
fn accumulate_matmul<T: Scalar>(
    grad: &mut [T],
    lay: &LayerLayout,
    block: Block,
    a: ArrayView2<T>,
    rhs: ArrayView2<T>,
) {
    let r = lay.range(block);
    let mut gv = view_mut(&mut grad[r], lay.shape(block));
    general_mat_mul(T::one(), &a, &rhs, T::one(), &mut gv);
}

/// `grad[block] += column sums of d`
fn accumulate_bias<T: Scalar>(grad: &mut [T], lay: &LayerLayout, block: Block, d: &Array2<T>) {
    for (gb, col) in grad[lay.range(block)].iter_mut().zip(d.columns()) {
        *gb += col.sum();
    }
}
