use crate::error::{Error, Result};
use crate::geometry::{knn_indices, NeighborTable};
use crate::nn::{Binding, Init, Linear};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Neighbor aggregation shared by the encoder LAL and the decoder LCFFN.
///
/// For token `i` with neighbors `j ∈ nbr(i)`:
/// `out_i = Up(max_j GELU(Down([x_i; x_j])))`. The Down map over the
/// concatenation is evaluated as `x_i·W_top + x_j·W_bot + b`, so each token
/// is projected once and the pair features are formed by gathering.
#[derive(Clone, Debug)]
pub struct LocalAgg {
    pub down: Linear,
    pub up: Linear,
    pub d: usize,
    pub d_h: usize,
}

impl LocalAgg {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, d_h: usize) -> Result<Self> {
        Ok(Self {
            down: Linear::new(init, &format!("{name}.down"), 2 * d, d_h, true)?,
            up: Linear::new(init, &format!("{name}.up"), d_h, d, true)?,
            d,
            d_h,
        })
    }

    pub fn num_params(&self) -> usize {
        self.down.num_params() + self.up.num_params()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        x: Var,
        table: &NeighborTable,
    ) -> Result<Var> {
        let n = tape.value(x).rows();
        if table.queries() != n || table.flat().iter().any(|&j| j >= n) {
            return Err(Error::dim(
                "local_aggregation",
                format!("neighbor table for {} queries vs {n} tokens", table.queries()),
            ));
        }
        let k = table.k();
        let w = p.var(self.down.weight);
        let w_top = tape.slice_rows(w, 0, self.d)?;
        let w_bot = tape.slice_rows(w, self.d, self.d)?;
        let top = tape.linear(x, w_top, self.down.bias.map(|b| p.var(b)))?;
        let bot = tape.matmul(x, w_bot)?;
        let h = if k == 1 && table.flat().iter().enumerate().all(|(i, &j)| i == j) {
            tape.add(top, bot)?
        } else {
            let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
            let centre = tape.gather_rows(top, &rep)?;
            let nbr = tape.gather_rows(bot, table.flat())?;
            tape.add(centre, nbr)?
        };
        let h = tape.gelu(h);
        let pooled = tape.segment_max(h, k)?;
        self.up.forward(tape, p, pooled)
    }
}

/// KNN table of `centers` against themselves with a count check.
pub fn neighbor_table<T: Scalar>(centers: &Tensor<T>, k: usize) -> Result<NeighborTable> {
    if k > centers.rows() {
        return Err(Error::count(
            "local_aggregation",
            format!("k_local = {k} exceeds {} tokens", centers.rows()),
        ));
    }
    knn_indices(centers, centers, k)
}
