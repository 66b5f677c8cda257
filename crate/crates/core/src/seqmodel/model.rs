use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{ModelConfig, ModelOutputs, Sample, EOS};
use crate::error::{Error, Result};
use crate::numcore::{Grad, Group, ParamSet, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Loss value with its gradient with respect to the differentiated parameters.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Grad<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqModel {
    config: ModelConfig,
}

/// Parameter handles bound on a tape, looked up by name.
struct Bound<'a, T> {
    params: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    fn var(&self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        self.vars[idx]
    }
}

struct Encoded {
    ctc_log_probs: Var,
    keys: Var,
    values: Var,
}

/// What to differentiate: CE weight `1 − λ` and KD weight `λ` against a teacher.
struct Objective<'a, T> {
    ctc_weight: T,
    lambda: T,
    teacher: Option<&'a ModelOutputs<T>>,
}

impl SeqModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(SeqModel { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Uniform initialization in `±1/√fan_in`; biases zero, layer-norm gains one.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let c = &self.config;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| T::lit(rng.random_range(-s..s)))
                .collect();
            Tensor::matrix(rows, cols, data).expect("init shape")
        };
        let zeros = |cols: usize| Tensor::zeros(vec![1, cols]);
        let ones = |cols: usize| Tensor::filled(vec![1, cols], T::one());
        let h = c.d_hidden;
        let mut add = |name: String, group, norm, t| p.push(&name, group, norm, t).expect("unique names");
        use Group::{Decoder as D, Encoder as E};

        for l in 0..c.n_enc {
            let d = if l == 0 { c.d_in } else { h };
            for tap in ["w_prev", "w_cur", "w_next"] {
                add(format!("enc.{l}.{tap}"), E, false, uniform(d, h, 3 * d));
            }
            add(format!("enc.{l}.b"), E, false, zeros(h));
            add(format!("enc.{l}.ln_g"), E, true, ones(h));
            add(format!("enc.{l}.ln_b"), E, true, zeros(h));
        }
        add("ctc.w".into(), E, false, uniform(h, c.vocab + 1, h));
        add("ctc.b".into(), E, false, zeros(c.vocab + 1));
        add("att.wk".into(), E, false, uniform(h, h, h));
        add("att.wv".into(), E, false, uniform(h, h, h));

        add("att.wq".into(), D, false, uniform(h, h, h));
        add("dec.embed".into(), D, false, uniform(c.vocab, h, 1));
        add("dec.bos".into(), D, false, uniform(1, h, 1));
        add("dec.pos".into(), D, false, uniform(c.max_len, h, 1));
        for l in 0..c.n_dec {
            add(format!("dec.{l}.w"), D, false, uniform(h, h, h));
            add(format!("dec.{l}.b"), D, false, zeros(h));
            add(format!("dec.{l}.ln_g"), D, true, ones(h));
            add(format!("dec.{l}.ln_b"), D, true, zeros(h));
        }
        add("out.w".into(), D, false, uniform(h, c.vocab, h));
        add("out.b".into(), D, false, zeros(c.vocab));
        p
    }

    fn check_frames<T: Scalar>(&self, frames: &Tensor<T>) -> Result<()> {
        if frames.shape().len() != 2 || frames.cols() != self.config.d_in || frames.rows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "frames {:?}, expected L_F x {}",
                frames.shape(),
                self.config.d_in
            )));
        }
        Ok(())
    }

    fn check_sample<T: Scalar>(&self, sample: &Sample<T>) -> Result<()> {
        self.check_frames(&sample.frames)?;
        let n = sample.targets.len();
        if n == 0 || n > self.config.max_len {
            return Err(Error::DimensionMismatch(format!(
                "target length {n} outside [1, {}]",
                self.config.max_len
            )));
        }
        if let Some(&bad) = sample.targets.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::DimensionMismatch(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    fn bind<'a, T: Scalar>(&self, tape: &mut Tape<T>, params: &'a ParamSet<T>) -> Bound<'a, T> {
        let vars = params
            .entries()
            .iter()
            .map(|e| tape.leaf(e.tensor.clone()))
            .collect();
        Bound { params, vars }
    }

    fn encode<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound<T>, frames: &Tensor<T>) -> Encoded {
        let mut h = tape.leaf(frames.clone());
        for l in 0..self.config.n_enc {
            let prev = tape.shift(h, 1);
            let next = tape.shift(h, -1);
            let zp = tape.matmul(prev, b.var(&format!("enc.{l}.w_prev")));
            let zc = tape.matmul(h, b.var(&format!("enc.{l}.w_cur")));
            let zn = tape.matmul(next, b.var(&format!("enc.{l}.w_next")));
            let z = tape.add(zp, zc);
            let z = tape.add(z, zn);
            let z = tape.add_row(z, b.var(&format!("enc.{l}.b")));
            let mut a = tape.tanh(z);
            if l > 0 {
                a = tape.add(a, h);
            }
            h = tape.layer_norm(a, b.var(&format!("enc.{l}.ln_g")), b.var(&format!("enc.{l}.ln_b")));
        }
        let logits = tape.matmul(h, b.var("ctc.w"));
        let logits = tape.add_row(logits, b.var("ctc.b"));
        let ctc_log_probs = tape.log_softmax(logits);

        let positions = tape.leaf(sinusoid(frames.rows(), self.config.d_hidden));
        let keys = tape.matmul(h, b.var("att.wk"));
        let keys = tape.add(keys, positions);
        let values = tape.matmul(h, b.var("att.wv"));
        Encoded {
            ctc_log_probs,
            keys,
            values,
        }
    }

    /// Decoder log-probabilities for rows whose previous token is `prev`
    /// (`None` = begin of sequence) at decoder positions `pos`.
    fn decode_rows<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound<T>,
        enc: &Encoded,
        prev: &[Option<usize>],
        pos: &[usize],
    ) -> Var {
        let tokens: Vec<usize> = prev.iter().flatten().copied().collect();
        let input = match (prev.first(), tokens.is_empty()) {
            (Some(None), true) => b.var("dec.bos"),
            (Some(None), false) => {
                debug_assert!(prev[1..].iter().all(Option::is_some));
                let rest = tape.gather(b.var("dec.embed"), &tokens);
                tape.concat_rows(b.var("dec.bos"), rest)
            }
            _ => tape.gather(b.var("dec.embed"), &tokens),
        };
        let p = tape.gather(b.var("dec.pos"), pos);
        let s = tape.add(input, p);

        let q = tape.matmul(s, b.var("att.wq"));
        let scores = tape.matmul_t(q, enc.keys);
        let scores = tape.scale(scores, T::one() / T::count(self.config.d_hidden).sqrt());
        let weights = tape.softmax(scores);
        let context = tape.matmul(weights, enc.values);
        let mut s = tape.add(s, context);
        for l in 0..self.config.n_dec {
            let z = tape.matmul(s, b.var(&format!("dec.{l}.w")));
            let z = tape.add_row(z, b.var(&format!("dec.{l}.b")));
            let z = tape.tanh(z);
            let z = tape.add(s, z);
            s = tape.layer_norm(z, b.var(&format!("dec.{l}.ln_g")), b.var(&format!("dec.{l}.ln_b")));
        }
        let logits = tape.matmul(s, b.var("out.w"));
        let logits = tape.add_row(logits, b.var("out.b"));
        tape.log_softmax(logits)
    }

    fn teacher_forced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound<T>,
        sample: &Sample<T>,
    ) -> (Encoded, Var) {
        let enc = self.encode(tape, b, &sample.frames);
        let n = sample.targets.len();
        let prev: Vec<Option<usize>> = std::iter::once(None)
            .chain(sample.targets[..n - 1].iter().map(|&t| Some(t)))
            .collect();
        let pos: Vec<usize> = (0..n).collect();
        let dec = self.decode_rows(tape, b, &enc, &prev, &pos);
        (enc, dec)
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, sample: &Sample<T>) -> Result<ModelOutputs<T>> {
        self.check_sample(sample)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, params);
        let (enc, dec) = self.teacher_forced(&mut tape, &b, sample);
        let out = ModelOutputs {
            ctc_log_probs: tape.value(enc.ctc_log_probs).clone(),
            dec_log_probs: tape.value(dec).clone(),
        };
        if !out.ctc_log_probs.all_finite() || !out.dec_log_probs.all_finite() {
            return Err(Error::NonFinite {
                entry: "model outputs".into(),
            });
        }
        Ok(out)
    }

    /// Builds `(1−λ)·[(1−c)·L_dec + c·L_ctc] + λ·[(1−c)·L_dec,kd + c·L_ctc,kd]`,
    /// omitting terms whose weight is exactly zero.
    fn objective<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        sample: &Sample<T>,
        obj: Objective<T>,
        want_grad: bool,
    ) -> Result<(T, Option<Grad<T>>)> {
        self.check_sample(sample)?;
        let (lf, lw) = (sample.num_frames(), sample.num_tokens());
        let c = obj.ctc_weight;
        let lambda = obj.lambda;
        if let Some(t) = obj.teacher {
            if t.ctc_log_probs.shape() != [lf, self.config.vocab + 1]
                || t.dec_log_probs.shape() != [lw, self.config.vocab]
            {
                return Err(Error::DimensionMismatch(
                    "teacher outputs were not produced on this utterance".into(),
                ));
            }
        }

        let mut tape = Tape::new();
        let b = self.bind(&mut tape, params);
        let (enc, dec) = self.teacher_forced(&mut tape, &b, sample);
        let mut terms: Vec<(T, Var)> = Vec::new();

        if lambda < T::one() {
            let mut ce_terms = Vec::new();
            if c < T::one() {
                let mut w = Tensor::zeros(vec![lw, self.config.vocab]);
                let inv = -T::one() / T::count(lw);
                for (t, &y) in sample.targets.iter().enumerate() {
                    w.row_mut(t)[y] = inv;
                }
                ce_terms.push((T::one() - c, tape.weighted_sum(dec, w)));
            }
            if c > T::zero() {
                let nll = tape.ctc(enc.ctc_log_probs, &sample.targets, self.config.blank())?;
                ce_terms.push((c, tape.scale(nll, T::one() / T::count(lw))));
            }
            let ce = weighted_total(&mut tape, &ce_terms);
            terms.push((T::one() - lambda, ce));
        }
        if lambda > T::zero() {
            let teacher = obj.teacher.ok_or_else(|| {
                Error::InvalidConfig("distillation weight > 0 requires teacher outputs".into())
            })?;
            let mut kd_terms = Vec::new();
            if c < T::one() {
                let w = teacher.dec_log_probs.map(|v| -v.exp() / T::count(lw));
                kd_terms.push((T::one() - c, tape.weighted_sum(dec, w)));
            }
            if c > T::zero() {
                let w = teacher.ctc_log_probs.map(|v| -v.exp() / T::count(lf));
                kd_terms.push((c, tape.weighted_sum(enc.ctc_log_probs, w)));
            }
            let kd = weighted_total(&mut tape, &kd_terms);
            terms.push((lambda, kd));
        }
        let root = weighted_total(&mut tape, &terms);
        let value = tape.value(root).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { entry: "loss".into() });
        }
        if !want_grad {
            return Ok((value, None));
        }
        let mut grads = tape.backward(root);
        let mut grad = params.zeros_like();
        for (e, &v) in grad.entries_mut().iter_mut().zip(&b.vars) {
            if let Some(g) = grads.take(v) {
                e.tensor.data_mut().copy_from_slice(g.data());
            }
        }
        grad.check_finite()?;
        Ok((value, Some(grad)))
    }

    fn with_grad<T: Scalar>(&self, params: &ParamSet<T>, sample: &Sample<T>, obj: Objective<T>) -> Result<LossGrad<T>> {
        let (value, grad) = self.objective(params, sample, obj, true)?;
        Ok(LossGrad {
            value,
            grad: grad.expect("gradient requested"),
        })
    }

    /// CTC negative log-likelihood of the targets (not length-normalized).
    pub fn ctc_loss<T: Scalar>(&self, params: &ParamSet<T>, sample: &Sample<T>) -> Result<T> {
        let out = self.forward(params, sample)?;
        crate::numcore::ctc::ctc_nll(&out.ctc_log_probs, &sample.targets, self.config.blank()).map(|(l, _)| l)
    }

    /// `(1 − c)·L_dec + c·L_ctc`, both normalized per target token.
    pub fn ce_loss<T: Scalar>(&self, params: &ParamSet<T>, sample: &Sample<T>, c: T) -> Result<LossGrad<T>> {
        self.with_grad(params, sample, Objective { ctc_weight: c, lambda: T::zero(), teacher: None })
    }

    pub fn ce_loss_value<T: Scalar>(&self, params: &ParamSet<T>, sample: &Sample<T>, c: T) -> Result<T> {
        let obj = Objective { ctc_weight: c, lambda: T::zero(), teacher: None };
        Ok(self.objective(params, sample, obj, false)?.0)
    }

    /// Distillation cross-entropy from teacher outputs to the student,
    /// normalized per frame (CTC part) and per token (decoder part).
    pub fn kd_loss<T: Scalar>(
        &self,
        student: &ParamSet<T>,
        teacher: &ModelOutputs<T>,
        sample: &Sample<T>,
        c: T,
    ) -> Result<LossGrad<T>> {
        self.with_grad(student, sample, Objective { ctc_weight: c, lambda: T::one(), teacher: Some(teacher) })
    }

    pub fn kd_loss_value<T: Scalar>(
        &self,
        student: &ParamSet<T>,
        teacher: &ModelOutputs<T>,
        sample: &Sample<T>,
        c: T,
    ) -> Result<T> {
        let obj = Objective { ctc_weight: c, lambda: T::one(), teacher: Some(teacher) };
        Ok(self.objective(student, sample, obj, false)?.0)
    }

    /// `(1 − λ)·ce_loss + λ·kd_loss`; the teacher is evaluated without gradients.
    pub fn total_loss<T: Scalar>(
        &self,
        student: &ParamSet<T>,
        teacher: &ParamSet<T>,
        sample: &Sample<T>,
        c: T,
        lambda: T,
    ) -> Result<LossGrad<T>> {
        let (_, lg) = self.total_loss_inner(student, teacher, sample, c, lambda, true)?;
        Ok(lg.expect("gradient requested"))
    }

    pub fn total_loss_value<T: Scalar>(
        &self,
        student: &ParamSet<T>,
        teacher: &ParamSet<T>,
        sample: &Sample<T>,
        c: T,
        lambda: T,
    ) -> Result<T> {
        Ok(self.total_loss_inner(student, teacher, sample, c, lambda, false)?.0)
    }

    fn total_loss_inner<T: Scalar>(
        &self,
        student: &ParamSet<T>,
        teacher: &ParamSet<T>,
        sample: &Sample<T>,
        c: T,
        lambda: T,
        want_grad: bool,
    ) -> Result<(T, Option<LossGrad<T>>)> {
        if !(lambda >= T::zero() && lambda <= T::one()) {
            return Err(Error::InvalidConfig(format!("KD weight {lambda} outside [0, 1]")));
        }
        student.check_compatible(teacher)?;
        let teacher_out = if lambda > T::zero() {
            Some(self.forward(teacher, sample)?)
        } else {
            None
        };
        let obj = Objective {
            ctc_weight: c,
            lambda,
            teacher: teacher_out.as_ref(),
        };
        let (value, grad) = self.objective(student, sample, obj, want_grad)?;
        Ok((value, grad.map(|grad| LossGrad { value, grad })))
    }

    /// Greedy autoregressive decoding; stops at end-of-sequence or `max_len`.
    /// The end-of-sequence token is not included in the output.
    pub fn greedy_decode<T: Scalar>(&self, params: &ParamSet<T>, frames: &Tensor<T>) -> Result<Vec<usize>> {
        self.check_frames(frames)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, params);
        let enc = self.encode(&mut tape, &b, frames);
        let mut out = Vec::new();
        let mut prev = None;
        for t in 0..self.config.max_len {
            let row = self.decode_rows(&mut tape, &b, &enc, &[prev], &[t]);
            let best = argmax(tape.value(row).row(0));
            if best == EOS {
                break;
            }
            out.push(best);
            prev = Some(best);
        }
        Ok(out)
    }
}

fn weighted_total<T: Scalar>(tape: &mut Tape<T>, terms: &[(T, Var)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let term = if w == T::one() { v } else { tape.scale(v, w) };
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one loss term")
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fixed sinusoidal encoding of frame index, `frames × dim`.
pub(crate) fn sinusoid<T: Scalar>(frames: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(frames * dim);
    for k in 0..frames {
        for i in 0..dim {
            let rate = 1.0 / 100f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = k as f64 * rate;
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(frames, dim, data).expect("sinusoid shape")
}
