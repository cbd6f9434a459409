//! Emotion classifier heads and the three-part training objective.
//!
//! The teacher head classifies the fused sequence. During training each
//! present modality also gets a student head over its enhanced
//! representation; students learn from hard labels (cross-entropy) and from
//! the teacher's temperature-softened probabilities (KL divergence). The
//! teacher distribution is treated as a constant in the KL term unless
//! `kl_backprop_teacher` is set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Axis, Tape, Var};

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl ClassifierHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(ClassifierHead {
            w: store.add_uniform(&format!("{prefix}.w"), vec![d, classes], d, rng)?,
            b: store.add_zeros(&format!("{prefix}.b"), vec![classes])?,
        })
    }

    /// Teacher: `logits = fused . w + b`, probabilities by row softmax.
    pub fn teacher_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fused: Var,
    ) -> Result<(Var, Var)> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let logits = tape.matmul(fused, w)?;
        let logits = tape.add_bias(logits, b)?;
        let probs = tape.softmax(logits, Axis::Rows)?;
        Ok((logits, probs))
    }

    /// Student: `logits = ReLU(h_m) . w + b` with plain and softened
    /// probabilities. Softening at temperature 1 reuses the plain node, so it
    /// is exactly the identity.
    pub fn student_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_m: Var,
        temperature: f64,
    ) -> Result<StudentOut> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let rect = tape.relu(h_m);
        let logits = tape.matmul(rect, w)?;
        let logits = tape.add_bias(logits, b)?;
        let probs = tape.softmax(logits, Axis::Rows)?;
        let soft = soften(tape, logits, probs, temperature)?;
        Ok(StudentOut { logits, probs, soft })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StudentOut {
    pub logits: Var,
    pub probs: Var,
    pub soft: Var,
}

/// `softmax(logits / temperature)`; `probs` must be the plain softmax of the
/// same logits and is returned untouched when `temperature == 1`.
pub fn soften(tape: &mut Tape, logits: Var, probs: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if temperature == 1.0 {
        return Ok(probs);
    }
    let scaled = tape.scale(logits, 1.0 / temperature);
    tape.softmax(scaled, Axis::Rows)
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub task: f64,
    pub ce: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            task: 1.0,
            ce: 1.0,
            kl: 1.0,
        }
    }
}

/// Tape handles of every loss component plus the weighted total.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub task: Var,
    pub ce: BTreeMap<Modality, Var>,
    pub kl: BTreeMap<Modality, Var>,
    pub total: Var,
}

/// Loss component values of one pass (or aggregated over an epoch). Fields
/// for absent modalities stay zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub task: f64,
    pub ce_t: f64,
    pub ce_a: f64,
    pub ce_v: f64,
    pub kl_t: f64,
    pub kl_a: f64,
    pub kl_v: f64,
    pub total: f64,
    pub gamma_task: f64,
    pub gamma_ce: f64,
    pub gamma_kl: f64,
    pub temperature: f64,
}

impl LossReport {
    pub fn ce(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.ce_t,
            Modality::Audio => self.ce_a,
            Modality::Visual => self.ce_v,
        }
    }

    pub fn kl(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.kl_t,
            Modality::Audio => self.kl_a,
            Modality::Visual => self.kl_v,
        }
    }

    fn set_ce(&mut self, m: Modality, v: f64) {
        match m {
            Modality::Text => self.ce_t = v,
            Modality::Audio => self.ce_a = v,
            Modality::Visual => self.ce_v = v,
        }
    }

    fn set_kl(&mut self, m: Modality, v: f64) {
        match m {
            Modality::Text => self.kl_t = v,
            Modality::Audio => self.kl_a = v,
            Modality::Visual => self.kl_v = v,
        }
    }

    pub fn sum_ce(&self) -> f64 {
        self.ce_t + self.ce_a + self.ce_v
    }

    pub fn sum_kl(&self) -> f64 {
        self.kl_t + self.kl_a + self.kl_v
    }

    /// The defining identity of the report:
    /// `total = g1 * task + g2 * sum(ce) + g3 * sum(kl)` within 1e-12.
    pub fn is_consistent(&self) -> bool {
        let expect = self.gamma_task * self.task
            + self.gamma_ce * self.sum_ce()
            + self.gamma_kl * self.sum_kl();
        (self.total - expect).abs() <= 1e-12 * expect.abs().max(1.0)
    }
}

/// Assemble the training objective for one conversation.
///
/// `teacher` is (logits, probs) from the teacher head; `students` maps each
/// present modality to its head outputs (empty map when distillation is off).
#[allow(clippy::too_many_arguments)]
pub fn compute_losses(
    tape: &mut Tape,
    teacher: (Var, Var),
    students: &BTreeMap<Modality, StudentOut>,
    labels: &[usize],
    valid: &[bool],
    weights: LossWeights,
    temperature: f64,
    kl_backprop_teacher: bool,
) -> Result<(LossVars, LossReport)> {
    let (teacher_logits, teacher_probs) = teacher;
    let task = tape.masked_nll(teacher_probs, labels, valid)?;

    let mut report = LossReport {
        task: tape.value(task).data()[0],
        gamma_task: weights.task,
        gamma_ce: weights.ce,
        gamma_kl: weights.kl,
        temperature,
        ..LossReport::default()
    };

    let mut ce = BTreeMap::new();
    let mut kl = BTreeMap::new();
    if !students.is_empty() {
        let teacher_soft = soften(tape, teacher_logits, teacher_probs, temperature)?;
        let kl_target = if kl_backprop_teacher {
            teacher_soft
        } else {
            tape.detach(teacher_soft)
        };
        for (&m, student) in students {
            let ce_m = tape.masked_nll(student.probs, labels, valid)?;
            let kl_m = tape.masked_kl(student.soft, kl_target, valid)?;
            report.set_ce(m, tape.value(ce_m).data()[0]);
            report.set_kl(m, tape.value(kl_m).data()[0]);
            ce.insert(m, ce_m);
            kl.insert(m, kl_m);
        }
    }

    // Components with zero weight are left out of the graph entirely, so
    // their parameters receive no gradient.
    let mut total = tape.scale(task, weights.task);
    if weights.ce != 0.0 {
        for &v in ce.values() {
            let scaled = tape.scale(v, weights.ce);
            total = tape.add(total, scaled)?;
        }
    }
    if weights.kl != 0.0 {
        for &v in kl.values() {
            let scaled = tape.scale(v, weights.kl);
            total = tape.add(total, scaled)?;
        }
    }
    report.total = tape.value(total).data()[0];

    Ok((
        LossVars {
            task,
            ce,
            kl,
            total,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let (d, c) = (4, 6);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let head = ClassifierHead::init(&mut store, "teacher", d, c, &mut rng).unwrap();
        *store.value_mut(head.w) = Tensor::zeros(vec![d, c]);

        let mut tape = Tape::new();
        let fused = tape.constant(Tensor::new(vec![3, d], vec![0.7; 3 * d]).unwrap());
        let (_, probs) = head.teacher_forward(&mut tape, &store, fused).unwrap();
        for v in tape.value(probs).data() {
            assert!((v - 1.0 / c as f64).abs() < 1e-12);
        }
        // Rows sum to one.
        for i in 0..3 {
            let sum: f64 = (0..c).map(|j| tape.value(probs).get2(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_one_is_exact_identity() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let head = ClassifierHead::init(&mut store, "student.t", 5, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![2, 5], (0..10).map(f64::from).collect()).unwrap());
        let out = head.student_forward(&mut tape, &store, h, 1.0).unwrap();
        assert_eq!(out.probs, out.soft);
    }

    #[test]
    fn extreme_temperature_flattens_to_uniform() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let probs = tape.softmax(logits, Axis::Rows).unwrap();
        let soft = soften(&mut tape, logits, probs, 1e6).unwrap();
        for v in tape.value(soft).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-4);
        }
        assert!(soften(&mut tape, logits, probs, 0.0).is_err());
        assert!(soften(&mut tape, logits, probs, -2.0).is_err());
    }

    #[test]
    fn temperature_eight_matches_scaled_softmax_oracle() {
        // softmax([1,2,3]/8) computed directly from the formula.
        let logits_raw = [1.0f64, 2.0, 3.0];
        let exps: Vec<f64> = logits_raw.iter().map(|v| (v / 8.0).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / sum).collect();

        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[logits_raw.to_vec()]).unwrap());
        let probs = tape.softmax(logits, Axis::Rows).unwrap();
        let soft = soften(&mut tape, logits, probs, 8.0).unwrap();
        for (got, want) in tape.value(soft).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_is_applied_before_the_student_projection() {
        let (d, c) = (2, 2);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let head = ClassifierHead::init(&mut store, "student.a", d, c, &mut rng).unwrap();
        // Negative inputs must be rectified away: with all-negative h the
        // logits collapse to the bias (zero), giving uniform probs.
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![-5.0, -1.0]]).unwrap());
        let out = head.student_forward(&mut tape, &store, h, 2.0).unwrap();
        for v in tape.value(out.probs).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn total_is_the_weighted_component_sum() {
        let (d, c) = (3, 4);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let teacher = ClassifierHead::init(&mut store, "teacher", d, c, &mut rng).unwrap();
        let st = ClassifierHead::init(&mut store, "student.t", d, c, &mut rng).unwrap();
        let sa = ClassifierHead::init(&mut store, "student.a", d, c, &mut rng).unwrap();

        let mut tape = Tape::new();
        let fused = tape.constant(
            Tensor::new(vec![2, d], (0..2 * d).map(|i| 0.3 * i as f64).collect()).unwrap(),
        );
        let tf = teacher.teacher_forward(&mut tape, &store, fused).unwrap();
        let mut students = BTreeMap::new();
        students.insert(
            Modality::Text,
            st.student_forward(&mut tape, &store, fused, 2.0).unwrap(),
        );
        students.insert(
            Modality::Audio,
            sa.student_forward(&mut tape, &store, fused, 2.0).unwrap(),
        );

        let labels = [1usize, 3];
        let valid = [true, true];
        let weights = LossWeights {
            task: 1.0,
            ce: 0.5,
            kl: 2.0,
        };
        let (vars, report) = compute_losses(
            &mut tape, tf, &students, &labels, &valid, weights, 2.0, false,
        )
        .unwrap();
        assert!(report.is_consistent());
        assert!(report.task >= 0.0);
        assert!(report.kl_t >= 0.0 && report.kl_a >= 0.0);
        assert_eq!(report.kl_v, 0.0);
        let direct = tape.value(vars.total).data()[0];
        assert!((direct - report.total).abs() < 1e-15);
    }

    #[test]
    fn trivial_weighted_sum_example() {
        // task=1, sum(ce)=2, sum(kl)=3, unit gammas: total = 6.
        let report = LossReport {
            task: 1.0,
            ce_t: 2.0,
            kl_t: 1.5,
            kl_a: 1.5,
            total: 6.0,
            gamma_task: 1.0,
            gamma_ce: 1.0,
            gamma_kl: 1.0,
            temperature: 1.0,
            ..LossReport::default()
        };
        assert!(report.is_consistent());
    }

    #[test]
    fn zero_gamma_detaches_student_gradients() {
        let (d, c) = (3, 3);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let teacher = ClassifierHead::init(&mut store, "teacher", d, c, &mut rng).unwrap();
        let student = ClassifierHead::init(&mut store, "student.t", d, c, &mut rng).unwrap();

        let mut tape = Tape::new();
        let fused = tape.constant(
            Tensor::new(vec![2, d], (0..2 * d).map(|i| 0.2 * i as f64 - 0.5).collect()).unwrap(),
        );
        let tf = teacher.teacher_forward(&mut tape, &store, fused).unwrap();
        let mut students = BTreeMap::new();
        students.insert(
            Modality::Text,
            student.student_forward(&mut tape, &store, fused, 1.0).unwrap(),
        );
        let weights = LossWeights {
            task: 1.0,
            ce: 0.0,
            kl: 0.0,
        };
        let (vars, _) = compute_losses(
            &mut tape,
            tf,
            &students,
            &[0, 2],
            &[true, true],
            weights,
            1.0,
            false,
        )
        .unwrap();
        tape.backward(vars.total).unwrap();
        tape.harvest_into(&mut store);
        assert!(store.grad(student.w).iter().all(|&g| g == 0.0));
        assert!(store.grad(student.b).iter().all(|&g| g == 0.0));
        assert!(store.grad(teacher.w).iter().any(|&g| g != 0.0));
    }
}
