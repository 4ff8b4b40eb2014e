//! The closed layer set: fully connected, kernel-3 conv1d, batch norm and a
//! bidirectional LSTM. Each layer registers its parameters under a name
//! prefix and builds its forward pass onto a [`Graph`].

use super::graph::{Graph, Var};
use super::params::{Init, ParamStore};
use super::tensor::{Mat, Scalar};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; reparameterized sampling enabled.
    Train,
    /// Running statistics; posterior means instead of samples.
    Infer,
}

fn check_cols<T: Scalar>(g: &Graph<T>, x: Var, want: usize, layer: &str) -> Result<()> {
    let (_, cols) = g.shape(x);
    if cols != want {
        return Err(Error::shape(layer, format!("expected {want} input features, got {cols}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            bias,
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.register(
            &format!("{}.w", self.name),
            &[self.input, self.output],
            Init::Xavier {
                fan_in: self.input,
                fan_out: self.output,
            },
            true,
        )?;
        if self.bias {
            store.register(&format!("{}.b", self.name), &[self.output], Init::Zeros, true)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_cols(g, x, self.input, &self.name)?;
        let w = g.param(store, &format!("{}.w", self.name))?;
        let y = g.matmul(x, w);
        if self.bias {
            let b = g.param(store, &format!("{}.b", self.name))?;
            Ok(g.add_row(y, b))
        } else {
            Ok(y)
        }
    }
}

/// Kernel-3, stride-1, same-padded 1-D convolution over time. Input rows are
/// time steps, stacked in independent segments of `seg` rows.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Conv1d {
    pub const KERNEL: usize = 3;

    pub fn new(name: impl Into<String>, input: usize, output: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            bias,
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.register(
            &format!("{}.w", self.name),
            &[Self::KERNEL * self.input, self.output],
            Init::Xavier {
                fan_in: Self::KERNEL * self.input,
                fan_out: Self::KERNEL * self.output,
            },
            true,
        )?;
        if self.bias {
            store.register(&format!("{}.b", self.name), &[self.output], Init::Zeros, true)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        seg: usize,
    ) -> Result<Var> {
        check_cols(g, x, self.input, &self.name)?;
        let (rows, _) = g.shape(x);
        if seg == 0 || rows % seg != 0 {
            return Err(Error::shape(&self.name, format!("{rows} rows not divisible into segments of {seg}")));
        }
        let cols = g.im2col3(x, seg);
        let w = g.param(store, &format!("{}.w", self.name))?;
        let y = g.matmul(cols, w);
        if self.bias {
            let b = g.param(store, &format!("{}.b", self.name))?;
            Ok(g.add_row(y, b))
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let n = &self.name;
        store.register(&format!("{n}.gamma"), &[self.dim], Init::Const(1.0), true)?;
        store.register(&format!("{n}.beta"), &[self.dim], Init::Zeros, true)?;
        store.register(&format!("{n}.running_mean"), &[self.dim], Init::Zeros, false)?;
        store.register(&format!("{n}.running_var"), &[self.dim], Init::Const(1.0), false)?;
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        check_cols(g, x, self.dim, &self.name)?;
        let n = &self.name;
        let gamma = g.param(store, &format!("{n}.gamma"))?;
        let beta = g.param(store, &format!("{n}.beta"))?;
        let eps = T::from_f64_lossy(BN_EPS);
        match mode {
            Mode::Train => Ok(g.batch_norm_train(x, gamma, beta, eps, n)),
            Mode::Infer => {
                let rm = store.value(&format!("{n}.running_mean"))?;
                let rv = store.value(&format!("{n}.running_var"))?;
                let inv: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let shift: Vec<T> = rm.iter().zip(&inv).map(|(&m, &s)| -m * s).collect();
                let inv = g.constant(Mat::from_vec(1, self.dim, inv));
                let shift = g.constant(Mat::from_vec(1, self.dim, shift));
                let xn = g.mul_row(x, inv);
                let xn = g.add_row(xn, shift);
                let y = g.mul_row(xn, gamma);
                Ok(g.add_row(y, beta))
            }
        }
    }
}

/// Bidirectional single-layer LSTM. Sequences are item-major row stacks:
/// row `b·steps + t` holds item `b` at time `t`. Output has `2·hidden`
/// columns, forward direction first.
#[derive(Clone, Debug)]
pub struct Blstm {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl Blstm {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let h4 = 4 * self.hidden;
        for dir in ["fw", "bw"] {
            let p = format!("{}.{dir}", self.name);
            store.register(
                &format!("{p}.w_ih"),
                &[self.input, h4],
                Init::Xavier {
                    fan_in: self.input,
                    fan_out: h4,
                },
                true,
            )?;
            store.register(
                &format!("{p}.w_hh"),
                &[self.hidden, h4],
                Init::Xavier {
                    fan_in: self.hidden,
                    fan_out: h4,
                },
                true,
            )?;
            store.register(&format!("{p}.b"), &[h4], Init::LstmBias { hidden: self.hidden }, true)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        steps: usize,
    ) -> Result<Var> {
        check_cols(g, x, self.input, &self.name)?;
        let (rows, _) = g.shape(x);
        if steps == 0 || rows != batch * steps {
            return Err(Error::shape(
                &self.name,
                format!("{rows} rows cannot be {batch} sequences of {steps} steps"),
            ));
        }
        let fw = self.direction(g, store, x, batch, steps, "fw", false)?;
        let bw = self.direction(g, store, x, batch, steps, "bw", true)?;
        Ok(g.concat_cols(&[fw, bw]))
    }

    #[allow(clippy::too_many_arguments)]
    fn direction<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        steps: usize,
        dir: &str,
        reverse: bool,
    ) -> Result<Var> {
        let h = self.hidden;
        let p = format!("{}.{dir}", self.name);
        let w_ih = g.param(store, &format!("{p}.w_ih"))?;
        let w_hh = g.param(store, &format!("{p}.w_hh"))?;
        let b = g.param(store, &format!("{p}.b"))?;
        let xw = g.matmul(x, w_ih);
        let xw = g.add_row(xw, b);

        let mut state: Option<(Var, Var)> = None;
        let mut outs = vec![None; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let gates_x = g.gather_rows(xw, (0..batch).map(|bi| bi * steps + t).collect());
            let gates = match state {
                Some((h_prev, _)) => {
                    let hh = g.matmul(h_prev, w_hh);
                    g.add(gates_x, hh)
                }
                None => gates_x,
            };
            let i_pre = g.slice_cols(gates, 0, h);
            let f_pre = g.slice_cols(gates, h, 2 * h);
            let g_pre = g.slice_cols(gates, 2 * h, 3 * h);
            let o_pre = g.slice_cols(gates, 3 * h, 4 * h);
            let i_gate = g.sigmoid(i_pre);
            let f_gate = g.sigmoid(f_pre);
            let cand = g.tanh(g_pre);
            let o_gate = g.sigmoid(o_pre);
            let ig = g.mul(i_gate, cand);
            let c = match state {
                Some((_, c_prev)) => {
                    let fc = g.mul(f_gate, c_prev);
                    g.add(fc, ig)
                }
                None => ig,
            };
            let ct = g.tanh(c);
            let h_t = g.mul(o_gate, ct);
            outs[t] = Some(h_t);
            state = Some((h_t, c));
        }
        // Stack time-major, then permute back to item-major rows.
        let stacked: Vec<Var> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        let tm = g.concat_rows(&stacked);
        let perm = (0..batch * steps)
            .map(|r| {
                let (bi, t) = (r / steps, r % steps);
                t * batch + bi
            })
            .collect();
        Ok(g.gather_rows(tm, perm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::xavier_init;

    #[test]
    fn blstm_output_dim_is_twice_hidden() {
        let l = Blstm::new("l", 3, 5);
        let mut s = ParamStore::<f64>::new(1);
        l.register(&mut s).unwrap();
        xavier_init(&mut s);
        let mut g = Graph::new();
        let x = g.constant(Mat::filled(2 * 4, 3, 0.3));
        let y = l.forward(&mut g, &s, x, 2, 4).unwrap();
        assert_eq!(g.shape(y), (8, 10));
        assert_eq!(l.output_dim(), 10);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let l = Linear::new("enc_s.mu", 4, 2, true);
        let mut s = ParamStore::<f64>::new(1);
        l.register(&mut s).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Mat::zeros(1, 3));
        match l.forward(&mut g, &s, x) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "enc_s.mu"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn infer_mode_batch_norm_uses_running_stats() {
        let bn = BatchNorm::new("bn", 2);
        let mut s = ParamStore::<f64>::new(1);
        bn.register(&mut s).unwrap();
        s.get_mut("bn.running_mean").unwrap().value = vec![1.0, -1.0];
        s.get_mut("bn.running_var").unwrap().value = vec![4.0, 1.0];
        let mut g = Graph::new();
        let x = g.constant(Mat::from_vec(1, 2, vec![3.0, -1.0]));
        let y = bn.forward(&mut g, &s, x, Mode::Infer).unwrap();
        let v = &g.value(y).data;
        assert!((v[0] - 2.0 / (4.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
    }
}
