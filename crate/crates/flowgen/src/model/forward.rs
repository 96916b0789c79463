//! Forward passes for the three flows and the combined loss.
//!
//! One training example maps to one compute graph. The contextual flow runs
//! a pre-norm transformer over `X = [S'; T']` under the causal mask `M_C`;
//! the word and span flows run `[ATTN]` queries against per-layer contextual
//! keys/values under `M_W`/`M_S`, reusing the same layer parameters. Output
//! logits tie to the token embedding matrix.
//!
//! Layer indexing: flow states at layer `l+1` consume contextual keys from
//! layer `l`; the output head reads the final flow states after `layers`
//! blocks. Key/value projections of the contextual rows are computed once
//! per layer and concatenated with the flow's own projected symbol row,
//! which is bit-identical to projecting the concatenation.

use flowgen_tensor::graph::{Graph, NodeId, Reduction};
use flowgen_tensor::Tensor;

use crate::error::{Error, Result};
use crate::pipeline::TrainingExample;
use crate::seed::{derive_seed, stream};
use crate::spans::SpanBoundaries;
use crate::vocab::ATTN;

use super::masks::{build_masks, FlowMasks};
use super::{ModelParams, ParamBindings};

const LN_EPS: f64 = 1e-6;

/// What a forward pass should compute.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Apply dropout at the configured rate.
    pub dropout: bool,
    /// Bind parameters as differentiable leaves.
    pub trainable: bool,
    pub word_flow: bool,
    pub span_flow: bool,
    /// Capture final-layer word-flow attention probabilities per head.
    pub capture_word_attention: bool,
    pub dropout_seed: u64,
}

impl ForwardOptions {
    pub fn train(dropout_seed: u64) -> Self {
        ForwardOptions {
            dropout: true,
            trainable: true,
            word_flow: true,
            span_flow: true,
            capture_word_attention: false,
            dropout_seed,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            dropout: false,
            trainable: false,
            word_flow: true,
            span_flow: true,
            capture_word_attention: false,
            dropout_seed: 0,
        }
    }
}

/// Graph plus the interesting node ids of one forward pass.
pub struct ForwardOutput {
    pub graph: Graph,
    pub bindings: ParamBindings,
    /// Summed token+position+segment embeddings of the `X` rows (before
    /// dropout); gradient probes for leak tests attach here.
    pub x_embedding: NodeId,
    /// Contextual states `X^(0) ..= X^(L)`.
    pub contextual: Vec<NodeId>,
    /// Word-flow states `A_W^(0) ..= A_W^(L)` (empty when the flow is off).
    pub word_states: Vec<NodeId>,
    pub span_states: Vec<NodeId>,
    pub word_logits: Option<NodeId>,
    pub span_logits: Option<NodeId>,
    /// Final-layer word-flow attention probabilities, one `(m, n+m+m)`
    /// tensor per head.
    pub word_attention: Option<Vec<Tensor>>,
}

/// A single decode step's distribution source.
pub struct StepOutput {
    /// `(1, V)` word-flow logits for the next position.
    pub logits: Tensor,
    pub attention: Option<Vec<Tensor>>,
}

/// The three loss scalars of one batch or example.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub word_loss: f64,
    pub span_loss: f64,
    pub total: f64,
    pub word_node: NodeId,
    pub span_node: NodeId,
    pub total_node: NodeId,
    /// Active (non-ignored) target positions.
    pub count: usize,
}

/// Label-smoothed cross entropy of the clean targets under both flows'
/// logits, mixed by lambda.
pub fn compute_loss(
    g: &mut Graph,
    word_logits: NodeId,
    span_logits: NodeId,
    targets: &[u32],
    loss_mask: &[bool],
    lambda: f64,
    smoothing: f64,
    reduction: Reduction,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::usage(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let word_node = g.cross_entropy(word_logits, targets, loss_mask, smoothing, reduction)?;
    let span_node = g.cross_entropy(span_logits, targets, loss_mask, smoothing, reduction)?;
    let word_scaled = g.scale(word_node, lambda)?;
    let span_scaled = g.scale(span_node, 1.0 - lambda)?;
    let total_node = g.add(word_scaled, span_scaled)?;
    Ok(LossBreakdown {
        word_loss: g.value(word_node).item()?,
        span_loss: g.value(span_node).item()?,
        total: g.value(total_node).item()?,
        word_node,
        span_node,
        total_node,
        count: loss_mask.iter().filter(|&&m| m).count(),
    })
}

/// Per-layer node handles resolved once per forward.
struct LayerRefs {
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

/// Contextual-pass products each flow layer reuses: the post-norm input and
/// the projected keys/values of the `X` rows.
struct ContextualCache {
    states: Vec<NodeId>,
    keys: Vec<NodeId>,
    values: Vec<NodeId>,
}

struct DropoutCtx {
    rate: f64,
    base: u64,
    counter: u64,
}

impl DropoutCtx {
    fn next(&mut self) -> (f64, u64) {
        let seed = derive_seed(self.base, stream::DROPOUT, self.counter, 0);
        self.counter += 1;
        (self.rate, seed)
    }
}

/// The shared-parameter multi-flow transformer.
pub struct Model {
    pub params: ModelParams,
}

impl Model {
    pub fn new(params: ModelParams) -> Self {
        Model { params }
    }

    pub fn config(&self) -> &super::ModelConfig {
        &self.params.config
    }

    /// Full training-style forward over one assembled example.
    pub fn forward_example(&self, example: &TrainingExample, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let n = example.source_len();
        let m = example.target_len();
        let masks = build_masks(n, m, &example.boundaries)?;
        let x_ids: Vec<u32> = example
            .s_prime
            .iter()
            .chain(example.t_noised.iter())
            .copied()
            .collect();
        self.forward_parts(
            &x_ids,
            &example.positions,
            &example.segments,
            example.target_positions(),
            &masks,
            opts,
        )
    }

    /// Word-flow logits for the next position after `prefix`, given
    /// `source`. Operationally: insert one `[ATTN]` query at position
    /// `|source| + |prefix|`, run the flow, read its distribution; the
    /// symbol itself leaves no state behind.
    pub fn word_step(&self, source: &[u32], prefix: &[u32], capture_attention: bool) -> Result<StepOutput> {
        let n = source.len();
        let m = prefix.len();
        if n == 0 {
            return Err(Error::data("decode step needs a non-empty source"));
        }
        if n + m + 1 > self.params.config.max_positions {
            return Err(Error::data(format!(
                "sequence length {} exceeds max positions {}",
                n + m + 1,
                self.params.config.max_positions
            )));
        }
        let x_ids: Vec<u32> = source.iter().chain(prefix.iter()).copied().collect();
        let positions: Vec<u32> = (0..(n + m) as u32).collect();
        let mut segments = vec![0u8; n];
        segments.extend(std::iter::repeat(1u8).take(m));
        // The single query predicts target index m: position n+m, segment 1,
        // full visibility of X plus its own key.
        let masks = FlowMasks {
            contextual: std::sync::Arc::new(contextual_mask(n, m)),
            word: std::sync::Arc::new(Tensor::zeros(vec![1, n + m + 1])),
            span: std::sync::Arc::new(Tensor::zeros(vec![1, n + m + 1])),
        };
        let mut opts = ForwardOptions::eval();
        opts.span_flow = false;
        opts.capture_word_attention = capture_attention;
        let out = self.forward_with_query_positions(
            &x_ids,
            &positions,
            &segments,
            &[(n + m) as u32],
            &masks,
            &opts,
        )?;
        let logits = out
            .word_logits
            .map(|id| out.graph.value(id).clone())
            .expect("word flow was requested");
        Ok(StepOutput {
            logits,
            attention: out.word_attention,
        })
    }

    /// Training-style word-flow logits with `T' = target` (eval mode). Row
    /// `i` is the distribution for position `i` given `target[..i]`.
    pub fn word_logits_full(&self, source: &[u32], target: &[u32], capture_attention: bool) -> Result<ForwardOutput> {
        let n = source.len();
        let m = target.len();
        let x_ids: Vec<u32> = source.iter().chain(target.iter()).copied().collect();
        let positions: Vec<u32> = (0..(n + m) as u32).collect();
        let mut segments = vec![0u8; n];
        segments.extend(std::iter::repeat(1u8).take(m));
        // Unigram tiling; the word flow ignores span boundaries.
        let boundaries = SpanBoundaries((0..m).collect());
        let masks = build_masks(n, m, &boundaries)?;
        let target_positions: Vec<u32> = (n as u32..(n + m) as u32).collect();
        let mut opts = ForwardOptions::eval();
        opts.span_flow = false;
        opts.capture_word_attention = capture_attention;
        self.forward_with_query_positions(&x_ids, &positions, &segments, &target_positions, &masks, &opts)
    }

    fn forward_parts(
        &self,
        x_ids: &[u32],
        positions: &[u32],
        segments: &[u8],
        target_positions: &[u32],
        masks: &FlowMasks,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.forward_with_query_positions(x_ids, positions, segments, target_positions, masks, opts)
    }

    fn forward_with_query_positions(
        &self,
        x_ids: &[u32],
        positions: &[u32],
        segments: &[u8],
        query_positions: &[u32],
        masks: &FlowMasks,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let config = &self.params.config;
        if x_ids.len() > config.max_positions
            || query_positions.iter().any(|&p| p as usize >= config.max_positions)
        {
            return Err(Error::data(format!(
                "sequence length {} exceeds max positions {}",
                x_ids.len().max(
                    query_positions.iter().map(|&p| p as usize + 1).max().unwrap_or(0)
                ),
                config.max_positions
            )));
        }
        let mut graph = Graph::new();
        // The trainer inspects the loss itself and dumps the batch on NaN.
        graph.set_finite_checks(false);
        let bindings = self.params.bind(&mut graph, opts.trainable);
        let g = &mut graph;
        let layers: Vec<LayerRefs> = (0..config.layers).map(|l| self.layer_refs(&bindings, l)).collect();
        let mut drop = DropoutCtx {
            rate: if opts.dropout { config.dropout } else { 0.0 },
            base: opts.dropout_seed,
            counter: 0,
        };

        // X embeddings: token + position + segment.
        let tok_table = bindings.node(&self.params, "embed.token");
        let pos_table = bindings.node(&self.params, "embed.pos");
        let seg_table = bindings.node(&self.params, "embed.seg");
        let tok = g.embedding(tok_table, x_ids)?;
        let pos = g.embedding(pos_table, positions)?;
        let seg_ids: Vec<u32> = segments.iter().map(|&s| s as u32).collect();
        let seg = g.embedding(seg_table, &seg_ids)?;
        let sum = g.add(tok, pos)?;
        let x_embedding = g.add(sum, seg)?;
        let (rate, seed) = drop.next();
        let mut x = g.dropout(x_embedding, rate, seed)?;

        // Contextual stack, caching per-layer K/V projections for the flows.
        let mut cache = ContextualCache {
            states: vec![x],
            keys: Vec::new(),
            values: Vec::new(),
        };
        for layer in &layers {
            let x_ln = ln_affine(g, x, layer.ln1_gain, layer.ln1_bias)?;
            let q = project(g, x_ln, layer.wq, layer.bq)?;
            let k = project(g, x_ln, layer.wk, layer.bk)?;
            let v = project(g, x_ln, layer.wv, layer.bv)?;
            cache.keys.push(k);
            cache.values.push(v);
            let attn = attention_core(g, q, k, v, &masks.contextual, config.heads, layer, &mut drop, None)?;
            let h = g.add(x, attn)?;
            x = ffn_sublayer(g, h, layer, &mut drop)?;
            cache.states.push(x);
        }

        // Artificial-symbol flows.
        let m = query_positions.len();
        let run_flow = |g: &mut Graph,
                        drop: &mut DropoutCtx,
                        mask: &std::sync::Arc<Tensor>,
                        capture: bool|
         -> Result<(Vec<NodeId>, NodeId, Option<Vec<Tensor>>)> {
            let attn_ids = vec![ATTN; m];
            let tok = g.embedding(tok_table, &attn_ids)?;
            let pos = g.embedding(pos_table, query_positions)?;
            let seg = g.embedding(seg_table, &vec![1u32; m])?;
            let sum = g.add(tok, pos)?;
            let emb = g.add(sum, seg)?;
            let (rate, seed) = drop.next();
            let mut a = g.dropout(emb, rate, seed)?;
            let mut states = vec![a];
            let mut captured = None;
            for (l, layer) in layers.iter().enumerate() {
                let a_ln = ln_affine(g, a, layer.ln1_gain, layer.ln1_bias)?;
                let qa = project(g, a_ln, layer.wq, layer.bq)?;
                let ka = project(g, a_ln, layer.wk, layer.bk)?;
                let va = project(g, a_ln, layer.wv, layer.bv)?;
                let k_full = g.concat_rows(&[cache.keys[l], ka])?;
                let v_full = g.concat_rows(&[cache.values[l], va])?;
                let want_capture = capture && l + 1 == layers.len();
                let mut sink = want_capture.then(Vec::new);
                let attn = attention_core(g, qa, k_full, v_full, mask, config.heads, layer, drop, sink.as_mut())?;
                if let Some(sink) = sink {
                    captured = Some(sink);
                }
                let h = g.add(a, attn)?;
                a = ffn_sublayer(g, h, layer, drop)?;
                states.push(a);
            }
            let final_gain = bindings.node(&self.params, "final_ln.gain");
            let final_bias = bindings.node(&self.params, "final_ln.bias");
            let normed = ln_affine(g, a, final_gain, final_bias)?;
            let vocab_t = g.transpose(tok_table)?;
            let logits = g.matmul(normed, vocab_t)?;
            Ok((states, logits, captured))
        };

        let mut word_states = Vec::new();
        let mut span_states = Vec::new();
        let mut word_logits = None;
        let mut span_logits = None;
        let mut word_attention = None;
        if opts.word_flow {
            let (states, logits, captured) =
                run_flow(g, &mut drop, &masks.word, opts.capture_word_attention)?;
            word_states = states;
            word_logits = Some(logits);
            word_attention = captured;
        }
        if opts.span_flow {
            let (states, logits, _) = run_flow(g, &mut drop, &masks.span, false)?;
            span_states = states;
            span_logits = Some(logits);
        }

        Ok(ForwardOutput {
            graph,
            bindings,
            x_embedding,
            contextual: cache.states,
            word_states,
            span_states,
            word_logits,
            span_logits,
            word_attention,
        })
    }

    fn layer_refs(&self, bindings: &ParamBindings, l: usize) -> LayerRefs {
        let node = |suffix: &str| bindings.node(&self.params, &format!("layer{l}.{suffix}"));
        LayerRefs {
            ln1_gain: node("ln1.gain"),
            ln1_bias: node("ln1.bias"),
            wq: node("attn.wq"),
            bq: node("attn.bq"),
            wk: node("attn.wk"),
            bk: node("attn.bk"),
            wv: node("attn.wv"),
            bv: node("attn.bv"),
            wo: node("attn.wo"),
            bo: node("attn.bo"),
            ln2_gain: node("ln2.gain"),
            ln2_bias: node("ln2.bias"),
            w1: node("ffn.w1"),
            b1: node("ffn.b1"),
            w2: node("ffn.w2"),
            b2: node("ffn.b2"),
        }
    }
}

/// Causal contextual mask that also covers the empty-target decode case.
pub fn contextual_mask(n: usize, m: usize) -> Tensor {
    use flowgen_tensor::kernels::MASK_BLOCKED;
    let x_len = n + m;
    let mut data = vec![MASK_BLOCKED; x_len * x_len];
    for q in 0..x_len {
        for k in 0..x_len {
            let allowed = if q < n { k < n } else { k < n || k <= q };
            if allowed {
                data[q * x_len + k] = 0.0;
            }
        }
    }
    Tensor::from_vec(vec![x_len, x_len], data).expect("mask shape")
}

fn ln_affine(g: &mut Graph, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
    let normed = g.layer_norm(x, LN_EPS)?;
    let scaled = g.mul(normed, gain)?;
    Ok(g.add(scaled, bias)?)
}

fn project(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let p = g.matmul(x, w)?;
    Ok(g.add(p, b)?)
}

/// Multi-head attention from already-projected Q/K/V, with per-head additive
/// masking and output projection. Optionally copies the per-head attention
/// probabilities out of the graph.
#[allow(clippy::too_many_arguments)]
fn attention_core(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &std::sync::Arc<Tensor>,
    heads: usize,
    layer: &LayerRefs,
    drop: &mut DropoutCtx,
    mut capture: Option<&mut Vec<Tensor>>,
) -> Result<NodeId> {
    let (_, h) = g.value(q).dims2()?;
    let dk = h / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx_heads = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice_cols(q, head * dk, dk)?;
        let kh = g.slice_cols(k, head * dk, dk)?;
        let vh = g.slice_cols(v, head * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale)?;
        // Every flow query can reach at least its own key, so a fully
        // masked row is a caller bug here.
        let (probs, _) = g.masked_softmax(scaled, mask, false)?;
        if let Some(sink) = capture.as_deref_mut() {
            sink.push(g.value(probs).clone());
        }
        let (rate, seed) = drop.next();
        let probs = g.dropout(probs, rate, seed)?;
        ctx_heads.push(g.matmul(probs, vh)?);
    }
    let ctx = if ctx_heads.len() == 1 {
        ctx_heads[0]
    } else {
        g.concat_cols(&ctx_heads)?
    };
    let out = project(g, ctx, layer.wo, layer.bo)?;
    let (rate, seed) = drop.next();
    Ok(g.dropout(out, rate, seed)?)
}

fn ffn_sublayer(g: &mut Graph, h: NodeId, layer: &LayerRefs, drop: &mut DropoutCtx) -> Result<NodeId> {
    let h_ln = ln_affine(g, h, layer.ln2_gain, layer.ln2_bias)?;
    let inner = project(g, h_ln, layer.w1, layer.b1)?;
    let act = g.gelu(inner)?;
    let outer = project(g, act, layer.w2, layer.b2)?;
    let (rate, seed) = drop.next();
    let outer = g.dropout(outer, rate, seed)?;
    Ok(g.add(h, outer)?)
}
