use langaux_numcore::{Real, Reduction, Tape, Var};

use crate::dataset::IGNORE;
use crate::error::{Error, Result};

/// How per-position losses are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Normalization {
    /// Mean over contributing positions, separately per term.
    Mean,
    /// Per-trajectory sums averaged over the trajectories in the batch.
    Sum,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Self::Mean),
            "sum" => Some(Self::Sum),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub action_nll: f64,
    pub lang_nll: f64,
    pub lambda: f64,
    /// `action_weight * action_nll + lambda * lang_nll`.
    pub total: f64,
    pub action_count: usize,
    pub lang_count: usize,
}

/// One term: either absent or logits with their targets.
pub struct Term<'a> {
    pub logits: Var,
    pub targets: &'a [usize],
}

fn term<F: Real>(tape: &mut Tape<F>, t: &Term, norm: Normalization, trajectories: usize) -> Result<(Var, usize)> {
    let count = t.targets.iter().filter(|&&x| x != IGNORE).count();
    let v = match norm {
        Normalization::Mean => tape.cross_entropy(t.logits, t.targets, IGNORE, Reduction::Mean)?,
        Normalization::Sum => {
            let s = tape.cross_entropy(t.logits, t.targets, IGNORE, Reduction::Sum)?;
            tape.scale(s, F::from_f64_lossy(1.0 / trajectories.max(1) as f64))
        }
    };
    Ok((v, count))
}

/// Action term plus `lambda` times the language term. A missing action
/// term (objectives that only train the decoder) contributes nothing; a
/// missing language term reports `lang_nll = 0` with zero count and leaves
/// the total equal to the action term.
pub fn joint_loss<F: Real>(
    tape: &mut Tape<F>,
    action: Option<Term>,
    lang: Option<Term>,
    lambda: f64,
    norm: Normalization,
    trajectories: usize,
) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must be a nonnegative number, got {lambda}"
        )));
    }
    let mut out = LossBreakdown {
        lambda,
        ..LossBreakdown::default()
    };
    let mut total: Option<Var> = None;
    if let Some(a) = action {
        let (v, n) = term(tape, &a, norm, trajectories)?;
        out.action_nll = tape.value(v).item()?.as_f64();
        out.action_count = n;
        total = Some(v);
    }
    if let Some(l) = lang {
        let (v, n) = term(tape, &l, norm, trajectories)?;
        out.lang_nll = tape.value(v).item()?.as_f64();
        out.lang_count = n;
        let scaled = tape.scale(v, F::from_f64_lossy(lambda));
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = total.ok_or(Error::Empty("loss with neither an action nor a language term"))?;
    out.total = out.action_nll + lambda * out.lang_nll;
    Ok((total, out))
}
