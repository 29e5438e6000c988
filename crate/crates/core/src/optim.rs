//! Adam with moments that can be read and written one rank at a time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::Factor;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Identifies one trainable tensor: which adapter and which factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId {
    pub adapter: usize,
    pub factor: Factor,
}

impl ParamId {
    pub fn new(adapter: usize, factor: Factor) -> Self {
        Self { adapter, factor }
    }
}

/// How a rank is laid out inside a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    /// Column `i` (the `B` factor).
    Column,
    /// Row `i` (the `A` factor).
    Row,
    /// Element `i` (score logits).
    Element,
}

impl SliceAxis {
    pub fn for_factor(f: Factor) -> Self {
        match f {
            Factor::B => SliceAxis::Column,
            Factor::A => SliceAxis::Row,
            Factor::Logits => SliceAxis::Element,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Scalar = f64> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f64> {
    config: AdamConfig,
    step: u64,
    slots: BTreeMap<ParamId, Moments<T>>,
}

fn read_slice<T: Scalar>(t: &Tensor<T>, axis: SliceAxis, i: usize) -> Tensor<T> {
    match axis {
        SliceAxis::Column => t.column(i),
        SliceAxis::Row => t.row(i),
        SliceAxis::Element => Tensor::vector(vec![t.data()[i]]),
    }
}

fn write_slice<T: Scalar>(t: &mut Tensor<T>, axis: SliceAxis, i: usize, v: &[T]) -> Result<()> {
    match axis {
        SliceAxis::Column => t.set_column(i, v),
        SliceAxis::Row => t.set_row(i, v),
        SliceAxis::Element => {
            if v.len() != 1 {
                return Err(Error::Dimension {
                    op: "write element moment",
                    lhs: vec![1],
                    rhs: vec![v.len()],
                });
            }
            t.data_mut()[i] = v[0];
            Ok(())
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Adds zeroed moments for a parameter of the given shape.
    pub fn register(&mut self, id: ParamId, shape: &[usize]) {
        self.slots.insert(
            id,
            Moments {
                m: Tensor::zeros(shape),
                v: Tensor::zeros(shape),
            },
        );
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.keys().copied()
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<T>> {
        self.slots.get(&id)
    }

    fn slot(&self, id: ParamId) -> Result<&Moments<T>> {
        self.slots
            .get(&id)
            .ok_or_else(|| Error::contract(format!("no optimizer state for {id:?}")))
    }

    /// One bias-corrected Adam update over every registered parameter at the
    /// configured learning rate.
    pub fn step(&mut self, params: &mut [(ParamId, &mut Tensor<T>, &Tensor<T>)]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, lr)
    }

    /// Same as [`AdamState::step`] with an explicit learning rate (for
    /// schedules). `params` must cover every registered id exactly once.
    pub fn step_with_lr(
        &mut self,
        params: &mut [(ParamId, &mut Tensor<T>, &Tensor<T>)],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::contract(format!(
                "expected gradients for {} parameters, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        for (id, p, g) in params.iter() {
            let slot = self.slot(*id)?;
            if p.shape() != g.shape() || p.shape() != slot.m.shape() {
                return Err(Error::Dimension {
                    op: "adam step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(c.eps);
        let wd = T::from_f64_lossy(c.weight_decay);

        for (id, p, g) in params.iter_mut() {
            let slot = self.slots.get_mut(id).expect("checked above");
            let pd = p.data_mut();
            let md = slot.m.data_mut();
            let vd = slot.v.data_mut();
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(md).zip(vd) {
                let gi = gi + wd * *pi;
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Copies of the moment entries that belong to one rank.
    pub fn slice_moments(
        &self,
        id: ParamId,
        rank: usize,
        axis: SliceAxis,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if axis != SliceAxis::for_factor(id.factor) {
            return Err(Error::contract(format!(
                "{:?} factor is not sliced along {axis:?}",
                id.factor
            )));
        }
        let slot = self.slot(id)?;
        check_rank(&slot.m, axis, rank)?;
        Ok((read_slice(&slot.m, axis, rank), read_slice(&slot.v, axis, rank)))
    }

    /// Overwrites one rank's moments. Second moments must be non-negative.
    pub fn write_moments(
        &mut self,
        id: ParamId,
        rank: usize,
        m: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<()> {
        if v.data().iter().any(|&x| x.is_nan() || x < T::zero()) {
            return Err(Error::contract(
                "second-moment entries must be non-negative",
            ));
        }
        if !m.is_finite() || !v.is_finite() {
            return Err(Error::NonFinite("moment slice"));
        }
        let axis = SliceAxis::for_factor(id.factor);
        let slot = self
            .slots
            .get_mut(&id)
            .ok_or_else(|| Error::contract(format!("no optimizer state for {id:?}")))?;
        check_rank(&slot.m, axis, rank)?;
        if m.len() != v.len() {
            return Err(Error::Dimension {
                op: "write_moments",
                lhs: m.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        write_slice(&mut slot.m, axis, rank, m.data())?;
        write_slice(&mut slot.v, axis, rank, v.data())
    }

    /// Replaces a parameter's moments wholesale (checkpoint restore).
    pub fn set_moments(&mut self, id: ParamId, moments: Moments<T>) -> Result<()> {
        if moments.v.data().iter().any(|&x| x.is_nan() || x < T::zero()) {
            return Err(Error::contract("second-moment entries must be non-negative"));
        }
        self.slots.insert(id, moments);
        Ok(())
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }
}

fn check_rank<T: Scalar>(t: &Tensor<T>, axis: SliceAxis, rank: usize) -> Result<()> {
    let r = match axis {
        SliceAxis::Column => t.cols(),
        SliceAxis::Row => t.rows(),
        SliceAxis::Element => t.len(),
    };
    if rank >= r {
        return Err(Error::RankIndex { index: rank, rank: r });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(f: Factor) -> ParamId {
        ParamId::new(0, f)
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut st = AdamState::<f64>::new(AdamConfig::default());
        st.register(id(Factor::Logits), &[1]);
        let mut p = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![1.0]);
        st.step(&mut [(id(Factor::Logits), &mut p, &g)]).unwrap();
        // m̂ = 1, v̂ = 1, so the update is lr / (1 + eps)
        assert!((p.data()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut st = AdamState::<f64>::new(AdamConfig::default());
        st.register(id(Factor::A), &[2, 3]);
        let mut p = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let before = p.clone();
        let g = Tensor::zeros(&[2, 3]);
        for _ in 0..50 {
            st.step(&mut [(id(Factor::A), &mut p, &g)]).unwrap();
        }
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn step_requires_all_params_and_matching_shapes() {
        let mut st = AdamState::<f64>::new(AdamConfig::default());
        st.register(id(Factor::A), &[2, 2]);
        st.register(id(Factor::B), &[2, 2]);
        let mut p = Tensor::zeros(&[2, 2]);
        let g = Tensor::zeros(&[2, 2]);
        assert!(st.step(&mut [(id(Factor::A), &mut p, &g)]).is_err());
        let mut q = Tensor::zeros(&[2, 2]);
        let bad = Tensor::zeros(&[4]);
        assert!(st
            .step(&mut [(id(Factor::A), &mut p, &g), (id(Factor::B), &mut q, &bad)])
            .is_err());
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn slicing_b_and_a() {
        let mut st = AdamState::<f64>::new(AdamConfig::default());
        st.register(id(Factor::B), &[4, 2]);
        let mut p = Tensor::zeros(&[4, 2]);
        // gradient only on rank 0's column
        let g = Tensor::from_rows(&[&[1.0, 0.0], &[2.0, 0.0], &[-1.0, 0.0], &[0.5, 0.0]]);
        st.step(&mut [(id(Factor::B), &mut p, &g)]).unwrap();
        let (m1, v1) = st.slice_moments(id(Factor::B), 1, SliceAxis::Column).unwrap();
        assert_eq!(m1.len(), 4);
        assert!(m1.data().iter().chain(v1.data()).all(|&x| x == 0.0));
        let (m0, _) = st.slice_moments(id(Factor::B), 0, SliceAxis::Column).unwrap();
        assert!((m0.data()[1] - 0.2).abs() < 1e-15);

        // reassembled slices equal the full moment tensor
        let full = st.moments(id(Factor::B)).unwrap().m.clone();
        let mut rebuilt = Tensor::zeros(&[4, 2]);
        for r in 0..2 {
            let (m, _) = st.slice_moments(id(Factor::B), r, SliceAxis::Column).unwrap();
            rebuilt.set_column(r, m.data()).unwrap();
        }
        assert!(rebuilt.bitwise_eq(&full));

        assert!(st.slice_moments(id(Factor::B), 0, SliceAxis::Row).is_err());
        assert!(st.slice_moments(id(Factor::B), 2, SliceAxis::Column).is_err());
    }

    #[test]
    fn write_then_read_and_isolation() {
        let mut st = AdamState::<f64>::new(AdamConfig::default());
        st.register(id(Factor::A), &[3, 2]);
        let mut p = Tensor::zeros(&[3, 2]);
        let g = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        st.step(&mut [(id(Factor::A), &mut p, &g)]).unwrap();
        let before = st.moments(id(Factor::A)).unwrap().clone();

        let m = Tensor::vector(vec![0.7, -0.1]);
        let v = Tensor::vector(vec![0.2, 0.3]);
        st.write_moments(id(Factor::A), 2, &m, &v).unwrap();
        let (rm, rv) = st.slice_moments(id(Factor::A), 2, SliceAxis::Row).unwrap();
        assert!(rm.bitwise_eq(&m) && rv.bitwise_eq(&v));
        let after = st.moments(id(Factor::A)).unwrap();
        for r in 0..2 {
            assert!(after.m.row(r).bitwise_eq(&before.m.row(r)));
            assert!(after.v.row(r).bitwise_eq(&before.v.row(r)));
        }

        let neg = Tensor::vector(vec![0.1, -0.1]);
        assert!(st.write_moments(id(Factor::A), 0, &m, &neg).is_err());
        let short = Tensor::vector(vec![0.1]);
        assert!(st.write_moments(id(Factor::A), 0, &short, &short).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        let bad = AdamConfig {
            beta2: 1.0,
            ..AdamConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
