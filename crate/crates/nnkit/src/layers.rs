use crate::graph::{sigmoid, Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{NnError, Result};

/// Affine map `W x + b` with `W: [out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let w = store.add_uniform(&format!("{name}.w"), &[output, input], input)?;
        let b = store.add_uniform(&format!("{name}.b"), &[output], input)?;
        Ok(Self { w, b, input, output })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let wx = g.matvec(self.w, x)?;
        let b = g.param(self.b);
        g.add(wx, b)
    }

    /// Tape-free forward pass; bitwise equal to [`Dense::forward`].
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = matvec(store, self.w, x)?;
        add_param(&mut y, store.get(self.b));
        Ok(y)
    }
}

/// `W x` accumulated in the same order as the tape's matvec.
pub fn matvec(store: &ParamStore, w: ParamId, x: &[f64]) -> Result<Vec<f64>> {
    let t = store.get(w);
    let (rows, cols) = t.matrix_dims();
    if x.len() != cols {
        return Err(NnError::Config(format!(
            "matvec `{}`: expected input of {cols}, got {}",
            store.name(w),
            x.len()
        )));
    }
    let data = t.data();
    Ok((0..rows)
        .map(|r| {
            crate::tensor::dot_wx(&data[r * cols..(r + 1) * cols], x)
        })
        .collect())
}

fn add_param(y: &mut [f64], b: &Tensor) {
    y.iter_mut().zip(b.data()).for_each(|(v, &c)| *v += c as f64);
}

/// Lookup table of `rows` vectors of length `dim`.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize) -> Result<Self> {
        // one-hot input: a single active unit feeds each output
        let table = store.add_uniform(&format!("{name}.table"), &[rows, dim], 1)?;
        Ok(Self { table, rows, dim })
    }

    pub fn lookup(&self, g: &mut Graph, index: usize) -> Result<NodeId> {
        g.embed_row(self.table, index)
    }

    pub fn row(&self, store: &ParamStore, index: usize) -> Result<Vec<f64>> {
        if index >= self.rows {
            return Err(NnError::Argument(format!("row {index} out of range for {} rows", self.rows)));
        }
        Ok(store.get(self.table).row(index).iter().map(|&v| v as f64).collect())
    }
}

/// Gated recurrent cell.
///
/// ```text
/// z  = sigmoid(Wz x + Uz h + bz)
/// r  = sigmoid(Wr x + Ur h + br)
/// n  = tanh(Wn x + Un (r * h) + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wn: ParamId,
    pub un: ParamId,
    pub bn: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let mut mat = |gate: &str, cols: usize| {
            store.add_uniform(&format!("{name}.{gate}"), &[hidden, cols], hidden)
        };
        let wz = mat("wz", input)?;
        let uz = mat("uz", hidden)?;
        let wr = mat("wr", input)?;
        let ur = mat("ur", hidden)?;
        let wn = mat("wn", input)?;
        let un = mat("un", hidden)?;
        let bz = store.add_uniform(&format!("{name}.bz"), &[hidden], hidden)?;
        let br = store.add_uniform(&format!("{name}.br"), &[hidden], hidden)?;
        let bn = store.add_uniform(&format!("{name}.bn"), &[hidden], hidden)?;
        Ok(Self {
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wn,
            un,
            bn,
            input,
            hidden,
        })
    }

    pub fn step(&self, g: &mut Graph, state: NodeId, input: NodeId) -> Result<NodeId> {
        if g.value(state).len() != self.hidden || g.value(input).len() != self.input {
            return Err(NnError::Config(format!(
                "recurrent step expects state {} / input {}, got {} / {}",
                self.hidden,
                self.input,
                g.value(state).len(),
                g.value(input).len()
            )));
        }
        let gate = |g: &mut Graph, w: ParamId, u: ParamId, b: ParamId, h: NodeId| -> Result<NodeId> {
            let wx = g.matvec(w, input)?;
            let uh = g.matvec(u, h)?;
            let s = g.add(wx, uh)?;
            let bias = g.param(b);
            g.add(s, bias)
        };
        let z_pre = gate(g, self.wz, self.uz, self.bz, state)?;
        let z = g.sigmoid(z_pre);
        let r_pre = gate(g, self.wr, self.ur, self.br, state)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, state)?;
        let n_pre = gate(g, self.wn, self.un, self.bn, rh)?;
        let n = g.tanh(n_pre);
        let keep = g.one_minus(z);
        let a = g.mul(keep, n)?;
        let b = g.mul(z, state)?;
        g.add(a, b)
    }

    /// Tape-free step; bitwise equal to [`GruCell::step`].
    pub fn apply(&self, store: &ParamStore, state: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.hidden || input.len() != self.input {
            return Err(NnError::Config(format!(
                "recurrent step expects state {} / input {}, got {} / {}",
                self.hidden,
                self.input,
                state.len(),
                input.len()
            )));
        }
        let gate = |w: ParamId, u: ParamId, b: ParamId, h: &[f64]| -> Result<Vec<f64>> {
            let mut s = matvec(store, w, input)?;
            let uh = matvec(store, u, h)?;
            s.iter_mut().zip(&uh).for_each(|(a, b)| *a += b);
            add_param(&mut s, store.get(b));
            Ok(s)
        };
        let z: Vec<f64> = gate(self.wz, self.uz, self.bz, state)?.into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate(self.wr, self.ur, self.br, state)?.into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(state).map(|(a, b)| a * b).collect();
        let n = gate(self.wn, self.un, self.bn, &rh)?;
        Ok(n.iter()
            .zip(&z)
            .zip(state)
            .map(|((n, z), h)| (1.0 - z) * n.tanh() + z * h)
            .collect())
    }
}
