use langaux_numcore::{Real, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{EncoderKind, ModelConfig};
use crate::model::params::{AttnIdx, Group, Layout, LnIdx, MlpIdx, ModelParams};

const LN_EPS: f64 = 1e-5;

/// One example for the encoder. `obs` holds `steps * obs_tokens` tokens,
/// row-major by step.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub goal: &'a [usize],
    pub plan: &'a [usize],
    pub obs: &'a [u16],
    pub steps: usize,
}

/// Latent rows of one encoded example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExampleRows {
    /// Rows `goal`, then `plan`, then one latent per timestep.
    Sequence {
        goal: std::ops::Range<usize>,
        obs: std::ops::Range<usize>,
    },
    /// Per timestep, `base[t]` is the CLS row, followed by the grid rows,
    /// then goal and plan rows.
    State { base: Vec<usize>, grid: usize, goal: usize },
}

impl ExampleRows {
    pub fn steps(&self) -> usize {
        match self {
            Self::Sequence { obs, .. } => obs.len(),
            Self::State { base, .. } => base.len(),
        }
    }

    /// Row the policy reads at 0-based step `t`.
    pub fn policy_row(&self, t: usize) -> usize {
        match self {
            Self::Sequence { obs, .. } => obs.start + t,
            Self::State { base, .. } => base[t],
        }
    }

    /// Goal-token rows (for the state encoder, those of step 0).
    pub fn goal_rows(&self) -> Vec<usize> {
        match self {
            Self::Sequence { goal, .. } => goal.clone().collect(),
            Self::State { base, grid, goal } => (0..*goal).map(|j| base[0] + 1 + grid + j).collect(),
        }
    }

    /// Sequence encoder: `z_1..z_T`. State encoder at step `t`: CLS and grid
    /// rows of that step.
    pub fn latent_rows(&self, t: usize) -> Vec<usize> {
        match self {
            Self::Sequence { obs, .. } => obs.clone().collect(),
            Self::State { base, grid, .. } => (base[t]..base[t] + 1 + grid).collect(),
        }
    }
}

pub struct Encoded {
    pub z: Var,
    pub examples: Vec<ExampleRows>,
}

/// Decoder query block with its own self- and cross-attention masks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeItem {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    /// `tokens.len()` squared.
    pub self_allow: Vec<bool>,
    /// Rows of the encoder output used as keys.
    pub keys: Vec<usize>,
    /// `tokens.len() x keys.len()`.
    pub cross_allow: Vec<bool>,
}

impl DecodeItem {
    /// Instructions laid end to end; each attends causally within itself and
    /// to the keys its `caps` entry allows (a prefix of `keys`).
    pub fn from_instructions(instructions: &[Vec<usize>], keys: Vec<usize>, caps: &[usize]) -> Self {
        let n: usize = instructions.iter().map(Vec::len).sum();
        let nk = keys.len();
        let mut item = DecodeItem {
            tokens: Vec::with_capacity(n),
            positions: Vec::with_capacity(n),
            self_allow: vec![false; n * n],
            keys,
            cross_allow: Vec::with_capacity(n * nk),
        };
        let mut off = 0;
        for (ins, &cap) in instructions.iter().zip(caps) {
            for (j, &tok) in ins.iter().enumerate() {
                item.tokens.push(tok);
                item.positions.push(j);
                let row = off + j;
                for jj in 0..=j {
                    item.self_allow[row * n + off + jj] = true;
                }
                item.cross_allow.extend((0..nk).map(|c| c < cap));
            }
            off += ins.len();
        }
        item
    }
}

struct Span {
    q_off: usize,
    q_len: usize,
    k_off: usize,
    k_len: usize,
}

/// Per-block keys and values of the rows encoded so far.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    keys: Vec<Option<Var>>,
    values: Vec<Option<Var>>,
    steps: usize,
}

impl EncoderCache {
    /// Observations appended so far.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Parameters bound to one tape.
pub struct Forward<'p, F> {
    pub params: &'p ModelParams<F>,
    layout: Layout,
    vars: Vec<Var>,
}

impl<'p, F: Real> Forward<'p, F> {
    /// Binds every tensor as a leaf; groups rejected by `trainable` become
    /// constants and receive no gradient.
    pub fn bind(tape: &mut Tape<F>, params: &'p ModelParams<F>, trainable: impl Fn(Group) -> bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), trainable(params.group_of(i))))
            .collect();
        Self {
            params,
            layout: params.layout(),
            vars,
        }
    }

    /// Uses `vars`, one per tensor of `params` and of matching shapes, as
    /// the parameters.
    pub fn with_vars(tape: &Tape<F>, params: &'p ModelParams<F>, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != params.tensors.len() {
            return Err(Error::Config(format!(
                "{} variables bound for {} parameter tensors",
                vars.len(),
                params.tensors.len()
            )));
        }
        for (v, t) in vars.iter().zip(&params.tensors) {
            if tape.shape(*v) != t.shape() {
                return Err(langaux_numcore::NumError::Shape {
                    op: "with_vars",
                    lhs: tape.shape(*v).to_vec(),
                    rhs: t.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(Self {
            params,
            layout: params.layout(),
            vars,
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn cfg(&self) -> &ModelConfig {
        &self.params.config
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn linear(&self, tape: &mut Tape<F>, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = tape.matmul(x, self.v(w))?;
        Ok(tape.add(y, self.v(b))?)
    }

    fn ln(&self, tape: &mut Tape<F>, x: Var, ln: LnIdx) -> Result<Var> {
        Ok(tape.layer_norm(x, self.v(ln.g), self.v(ln.b), LN_EPS)?)
    }

    fn drop(&self, tape: &mut Tape<F>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        match rng {
            Some(r) => tape.dropout(x, self.cfg().dropout, &mut **r),
            None => x,
        }
    }

    fn attend(
        &self,
        tape: &mut Tape<F>,
        q: Var,
        k: Var,
        v: Var,
        spans: &[Span],
        allows: &[Option<&[bool]>],
    ) -> Result<Var> {
        let heads = self.cfg().heads;
        let whole_q = tape.shape(q)[0];
        let whole_k = tape.shape(k)[0];
        if let [s] = spans {
            if s.q_len == whole_q && s.k_len == whole_k {
                return Ok(tape.attention(q, k, v, heads, allows[0])?);
            }
        }
        let mut outs = Vec::with_capacity(spans.len());
        for (s, allow) in spans.iter().zip(allows) {
            let qs = tape.slice_rows(q, s.q_off, s.q_len)?;
            let ks = tape.slice_rows(k, s.k_off, s.k_len)?;
            let vs = tape.slice_rows(v, s.k_off, s.k_len)?;
            outs.push(tape.attention(qs, ks, vs, heads, *allow)?);
        }
        Ok(tape.concat(&outs)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_block(
        &self,
        tape: &mut Tape<F>,
        xq: Var,
        xkv: Var,
        a: AttnIdx,
        spans: &[Span],
        allows: &[Option<&[bool]>],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let q = self.linear(tape, xq, a.wq, a.bq)?;
        let k = self.linear(tape, xkv, a.wk, a.bk)?;
        let v = self.linear(tape, xkv, a.wv, a.bv)?;
        let att = self.attend(tape, q, k, v, spans, allows)?;
        let o = self.linear(tape, att, a.wo, a.bo)?;
        Ok(self.drop(tape, o, rng))
    }

    fn mlp_block(&self, tape: &mut Tape<F>, x: Var, m: MlpIdx, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let h = self.linear(tape, x, m.w1, m.b1)?;
        let h = tape.gelu(h);
        let o = self.linear(tape, h, m.w2, m.b2)?;
        Ok(self.drop(tape, o, rng))
    }

    fn text_rows(&self, tape: &mut Tape<F>, ids: &[usize], pos_table: usize, max: usize, what: &str) -> Result<Var> {
        if ids.len() > max {
            return Err(Error::Config(format!(
                "{what} of {} tokens exceeds the limit of {max}",
                ids.len()
            )));
        }
        let vocab = self.cfg().text_vocab_size;
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Config(format!(
                "{what} token {bad} is outside the text vocabulary of {vocab}"
            )));
        }
        let e = tape.embedding(self.v(self.layout.text_embed), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = tape.embedding(self.v(pos_table), &positions)?;
        Ok(tape.add(e, p)?)
    }

    fn check_input(&self, x: &EncoderInput) -> Result<()> {
        let cfg = self.cfg();
        if x.steps == 0 {
            return Err(Error::Empty("observation sequence"));
        }
        if x.steps > cfg.max_seq_len {
            return Err(Error::Length {
                len: x.steps,
                max: cfg.max_seq_len,
            });
        }
        if x.obs.len() != x.steps * cfg.obs_tokens {
            return Err(Error::Config(format!(
                "expected {} observation tokens for {} steps, got {}",
                x.steps * cfg.obs_tokens,
                x.steps,
                x.obs.len()
            )));
        }
        if let Some(&bad) = x.obs.iter().find(|&&t| t as usize >= cfg.obs_vocab_size) {
            return Err(Error::Config(format!(
                "observation token {bad} is outside the vocabulary of {}",
                cfg.obs_vocab_size
            )));
        }
        match (cfg.max_plan_len, x.plan.len()) {
            (0, 0) => {}
            (0, _) => return Err(Error::Config("this model takes no instruction block".into())),
            (_, 0) => return Err(Error::Config("this model requires an instruction block".into())),
            _ => {}
        }
        Ok(())
    }

    /// Encodes a batch of examples into one latent matrix.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        inputs: &[EncoderInput],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded> {
        if inputs.is_empty() {
            return Err(Error::Empty("encoder batch"));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let cfg = self.cfg().clone();
        let mut parts = Vec::new();
        let mut examples = Vec::with_capacity(inputs.len());
        let mut spans = Vec::new();
        let mut allows: Vec<Option<Vec<bool>>> = Vec::new();
        let mut row = 0;
        for x in inputs {
            let (g, p, t) = (x.goal.len(), x.plan.len(), x.steps);
            let goal_x = (g > 0)
                .then(|| self.text_rows(tape, x.goal, self.layout.goal_pos, cfg.max_goal_len, "goal"))
                .transpose()?;
            let plan_x = (p > 0)
                .then(|| {
                    let pos = self.layout.plan_pos.expect("plan checked against config");
                    self.text_rows(tape, x.plan, pos, cfg.max_plan_len, "instruction block")
                })
                .transpose()?;
            match cfg.encoder {
                EncoderKind::Sequence => {
                    let k = cfg.obs_tokens;
                    let ids: Vec<usize> = x
                        .obs
                        .iter()
                        .enumerate()
                        .map(|(i, &tok)| (i % k) * cfg.obs_vocab_size + tok as usize)
                        .collect();
                    let e = tape.embedding_sum(self.v(self.layout.obs_embed), &ids, k)?;
                    let steps: Vec<usize> = (0..t).collect();
                    let tp = tape.embedding(self.v(self.layout.time_pos.expect("sequence layout")), &steps)?;
                    let obs_x = tape.add(e, tp)?;
                    parts.extend(goal_x);
                    parts.extend(plan_x);
                    parts.push(obs_x);
                    let n = g + p + t;
                    let prefix = g + p;
                    let mut allow = vec![false; n * n];
                    for r in 0..n {
                        let upto = if r < prefix { prefix } else { r + 1 };
                        allow[r * n..r * n + upto].iter_mut().for_each(|a| *a = true);
                    }
                    spans.push(Span {
                        q_off: row,
                        q_len: n,
                        k_off: row,
                        k_len: n,
                    });
                    allows.push(Some(allow));
                    examples.push(ExampleRows::Sequence {
                        goal: row..row + g,
                        obs: row + prefix..row + n,
                    });
                    row += n;
                }
                EncoderKind::State => {
                    let k = cfg.obs_tokens;
                    let toks: Vec<usize> = x.obs.iter().map(|&v| v as usize).collect();
                    let e = tape.embedding(self.v(self.layout.obs_embed), &toks)?;
                    let pos: Vec<usize> = (0..t * k).map(|i| i % k).collect();
                    let gp = tape.embedding(self.v(self.layout.grid_pos.expect("state layout")), &pos)?;
                    let grid_x = tape.add(e, gp)?;
                    let cls_x = tape.embedding(self.v(self.layout.cls.expect("state layout")), &vec![0; t])?;
                    // Stack [cls (t), grid (t*k), goal (g), plan (p)], then
                    // gather each step's block in order.
                    let mut stack = vec![cls_x, grid_x];
                    stack.extend(goal_x);
                    stack.extend(plan_x);
                    let stacked = tape.concat(&stack)?;
                    let block = 1 + k + g + p;
                    let mut order = Vec::with_capacity(t * block);
                    let mut base = Vec::with_capacity(t);
                    for s in 0..t {
                        base.push(row + s * block);
                        order.push(s);
                        order.extend((0..k).map(|j| t + s * k + j));
                        order.extend((0..g + p).map(|j| t + t * k + j));
                        spans.push(Span {
                            q_off: row + s * block,
                            q_len: block,
                            k_off: row + s * block,
                            k_len: block,
                        });
                        allows.push(None);
                    }
                    parts.push(tape.embedding(stacked, &order)?);
                    examples.push(ExampleRows::State { base, grid: k, goal: g });
                    row += t * block;
                }
            }
        }
        let mut x = tape.concat(&parts)?;
        x = self.drop(tape, x, &mut rng);
        let allow_refs: Vec<Option<&[bool]>> = allows.iter().map(|a| a.as_deref()).collect();
        for b in self.layout.enc_blocks.clone() {
            let h = self.ln(tape, x, b.ln1)?;
            let a = self.attn_block(tape, h, h, b.attn, &spans, &allow_refs, &mut rng)?;
            x = tape.add(x, a)?;
            let h = self.ln(tape, x, b.ln2)?;
            let m = self.mlp_block(tape, h, b.mlp, &mut rng)?;
            x = tape.add(x, m)?;
        }
        let z = self.ln(tape, x, self.layout.enc_ln)?;
        Ok(Encoded { z, examples })
    }

    /// Runs the goal and instruction rows of a sequence encoder and keeps
    /// their per-block keys and values for [`Forward::encode_step`].
    pub fn encode_prefix(&self, tape: &mut Tape<F>, goal: &[usize], plan: &[usize]) -> Result<EncoderCache> {
        let cfg = self.cfg().clone();
        if cfg.encoder != EncoderKind::Sequence {
            return Err(Error::Config("incremental encoding needs the sequence encoder".into()));
        }
        match (cfg.max_plan_len, plan.len()) {
            (0, 0) => {}
            (0, _) => return Err(Error::Config("this model takes no instruction block".into())),
            (_, 0) => return Err(Error::Config("this model requires an instruction block".into())),
            _ => {}
        }
        let mut parts = Vec::new();
        if !goal.is_empty() {
            parts.push(self.text_rows(tape, goal, self.layout.goal_pos, cfg.max_goal_len, "goal")?);
        }
        if !plan.is_empty() {
            let pos = self.layout.plan_pos.expect("plan checked against config");
            parts.push(self.text_rows(tape, plan, pos, cfg.max_plan_len, "instruction block")?);
        }
        let blocks = self.layout.enc_blocks.len();
        let mut cache = EncoderCache {
            keys: vec![None; blocks],
            values: vec![None; blocks],
            steps: 0,
        };
        if parts.is_empty() {
            return Ok(cache);
        }
        let mut x = tape.concat(&parts)?;
        for (i, b) in self.layout.enc_blocks.clone().into_iter().enumerate() {
            let h = self.ln(tape, x, b.ln1)?;
            let q = self.linear(tape, h, b.attn.wq, b.attn.bq)?;
            let k = self.linear(tape, h, b.attn.wk, b.attn.bk)?;
            let v = self.linear(tape, h, b.attn.wv, b.attn.bv)?;
            let att = tape.attention(q, k, v, cfg.heads, None)?;
            let o = self.linear(tape, att, b.attn.wo, b.attn.bo)?;
            x = tape.add(x, o)?;
            let h = self.ln(tape, x, b.ln2)?;
            let m = self.mlp_block(tape, h, b.mlp, &mut None)?;
            x = tape.add(x, m)?;
            cache.keys[i] = Some(k);
            cache.values[i] = Some(v);
        }
        Ok(cache)
    }

    /// Appends one observation to `cache` and returns its latent `[1, D]`,
    /// equal to the matching row of a full causal encode.
    pub fn encode_step(
        &self,
        tape: &mut Tape<F>,
        cache: &mut EncoderCache,
        obs: &[u16],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = self.cfg().clone();
        let t = cache.steps;
        if t >= cfg.max_seq_len {
            return Err(Error::Length {
                len: t + 1,
                max: cfg.max_seq_len,
            });
        }
        if obs.len() != cfg.obs_tokens {
            return Err(Error::Config(format!(
                "expected {} observation tokens, got {}",
                cfg.obs_tokens,
                obs.len()
            )));
        }
        if let Some(&bad) = obs.iter().find(|&&o| o as usize >= cfg.obs_vocab_size) {
            return Err(Error::Config(format!(
                "observation token {bad} is outside the vocabulary"
            )));
        }
        let ids: Vec<usize> = obs
            .iter()
            .enumerate()
            .map(|(i, &tok)| i * cfg.obs_vocab_size + tok as usize)
            .collect();
        let e = tape.embedding_sum(self.v(self.layout.obs_embed), &ids, cfg.obs_tokens)?;
        let tp = tape.embedding(self.v(self.layout.time_pos.expect("sequence layout")), &[t])?;
        let mut x = tape.add(e, tp)?;
        x = self.drop(tape, x, &mut rng);
        for (i, b) in self.layout.enc_blocks.clone().into_iter().enumerate() {
            let h = self.ln(tape, x, b.ln1)?;
            let q = self.linear(tape, h, b.attn.wq, b.attn.bq)?;
            let k = self.linear(tape, h, b.attn.wk, b.attn.bk)?;
            let v = self.linear(tape, h, b.attn.wv, b.attn.bv)?;
            let keys = match cache.keys[i] {
                Some(prev) => tape.concat(&[prev, k])?,
                None => k,
            };
            let values = match cache.values[i] {
                Some(prev) => tape.concat(&[prev, v])?,
                None => v,
            };
            cache.keys[i] = Some(keys);
            cache.values[i] = Some(values);
            let att = tape.attention(q, keys, values, cfg.heads, None)?;
            let o = self.linear(tape, att, b.attn.wo, b.attn.bo)?;
            let o = self.drop(tape, o, &mut rng);
            x = tape.add(x, o)?;
            let h = self.ln(tape, x, b.ln2)?;
            let m = self.mlp_block(tape, h, b.mlp, &mut rng)?;
            x = tape.add(x, m)?;
        }
        cache.steps += 1;
        self.ln(tape, x, self.layout.enc_ln)
    }

    /// Action logits for latent rows `z`.
    pub fn policy_from_latents(&self, tape: &mut Tape<F>, z: Var) -> Result<Var> {
        self.linear(tape, z, self.layout.pi_w, self.layout.pi_b)
    }

    /// Action logits `[sum of steps, action_count]`, examples in order.
    pub fn policy_logits(&self, tape: &mut Tape<F>, enc: &Encoded) -> Result<Var> {
        let rows: Vec<usize> = enc
            .examples
            .iter()
            .flat_map(|e| (0..e.steps()).map(move |t| e.policy_row(t)))
            .collect();
        let h = tape.embedding(enc.z, &rows)?;
        self.linear(tape, h, self.layout.pi_w, self.layout.pi_b)
    }

    /// Next-token logits `[sum of item lengths, decoder_vocab_size]`.
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        z: Var,
        items: &[DecodeItem],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = self.cfg().clone();
        if items.is_empty() || items.iter().any(|i| i.tokens.is_empty()) {
            return Err(Error::Empty("decoder batch"));
        }
        let z_rows = tape.shape(z)[0];
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut key_rows = Vec::new();
        let mut self_spans = Vec::new();
        let mut cross_spans = Vec::new();
        let (mut qo, mut ko) = (0, 0);
        for it in items {
            let n = it.tokens.len();
            let nk = it.keys.len();
            if it.positions.len() != n || it.self_allow.len() != n * n || it.cross_allow.len() != n * nk || nk == 0 {
                return Err(langaux_numcore::NumError::Shape {
                    op: "decode",
                    lhs: vec![n, nk],
                    rhs: vec![it.positions.len(), it.self_allow.len(), it.cross_allow.len()],
                }
                .into());
            }
            if let Some(&bad) = it.tokens.iter().find(|&&t| t >= cfg.decoder_vocab_size) {
                return Err(Error::Config(format!("decoder token {bad} is outside the vocabulary")));
            }
            if let Some(&bad) = it.positions.iter().find(|&&p| p >= cfg.max_instr_len) {
                return Err(Error::Length {
                    len: bad + 1,
                    max: cfg.max_instr_len,
                });
            }
            if let Some(&bad) = it.keys.iter().find(|&&r| r >= z_rows) {
                return Err(langaux_numcore::NumError::IndexOutOfRange {
                    op: "decode keys",
                    index: bad,
                    extent: z_rows,
                }
                .into());
            }
            tokens.extend_from_slice(&it.tokens);
            positions.extend_from_slice(&it.positions);
            key_rows.extend_from_slice(&it.keys);
            self_spans.push(Span {
                q_off: qo,
                q_len: n,
                k_off: qo,
                k_len: n,
            });
            cross_spans.push(Span {
                q_off: qo,
                q_len: n,
                k_off: ko,
                k_len: nk,
            });
            qo += n;
            ko += nk;
        }
        let self_allows: Vec<Option<&[bool]>> = items.iter().map(|i| Some(i.self_allow.as_slice())).collect();
        let cross_allows: Vec<Option<&[bool]>> = items.iter().map(|i| Some(i.cross_allow.as_slice())).collect();
        let e = tape.embedding(self.v(self.layout.dec_embed), &tokens)?;
        let p = tape.embedding(self.v(self.layout.dec_pos), &positions)?;
        let mut y = tape.add(e, p)?;
        y = self.drop(tape, y, &mut rng);
        let keys = tape.embedding(z, &key_rows)?;
        for b in self.layout.dec_blocks.clone() {
            let h = self.ln(tape, y, b.ln1)?;
            let a = self.attn_block(tape, h, h, b.self_attn, &self_spans, &self_allows, &mut rng)?;
            y = tape.add(y, a)?;
            let h = self.ln(tape, y, b.ln2)?;
            let c = self.attn_block(tape, h, keys, b.cross, &cross_spans, &cross_allows, &mut rng)?;
            y = tape.add(y, c)?;
            let h = self.ln(tape, y, b.ln3)?;
            let m = self.mlp_block(tape, h, b.mlp, &mut rng)?;
            y = tape.add(y, m)?;
        }
        let y = self.ln(tape, y, self.layout.dec_ln)?;
        self.linear(tape, y, self.layout.out_w, self.layout.out_b)
    }
}

/// Index of the largest entry of each row of a `[rows, cols]` buffer;
/// ties go to the lowest index.
pub fn argmax_rows<F: Real>(data: &[F], cols: usize) -> Vec<usize> {
    data.chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Scalar helper for tests and metrics.
pub fn log_softmax_at<F: Real>(row: &[F], target: usize) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    row[target].as_f64() - max - z.ln()
}
