//! Forward pass, teacher-forced loss and exact backward pass.

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, Axis};

use super::attention::{attend_query, attend_query_backward};
use super::lstm::{cell_backward, cell_forward, CellCache};
use super::{Batch, Dropout, Gradients, Model, ModelError};

/// Encoder states for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[B, S, 2H]`: forward and backward top-layer outputs per position.
    pub states: Array3<f64>,
    /// `[B, S]`: 1 on real source positions, 0 on padding.
    pub mask: Array2<f64>,
    /// Per layer `[B, 2H]`: final hidden states of both directions.
    pub final_hidden: Vec<Array2<f64>>,
    /// Per layer `[B, 2H]`: final cell states of both directions.
    pub final_cell: Vec<Array2<f64>>,
}

impl EncoderOutput {
    /// Output restricted to (or repeated along) the given batch rows.
    pub fn select(&self, rows: &[usize]) -> EncoderOutput {
        EncoderOutput {
            states: self.states.select(Axis(0), rows),
            mask: self.mask.select(Axis(0), rows),
            final_hidden: self.final_hidden.iter().map(|h| h.select(Axis(0), rows)).collect(),
            final_cell: self.final_cell.iter().map(|c| c.select(Axis(0), rows)).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.states.dim().0
    }

    /// Encoder states of one batch row over its real positions.
    pub fn row_states(&self, b: usize) -> ArrayView2<'_, f64> {
        self.states.index_axis(Axis(0), b)
    }
}

/// Per-layer decoder hidden and cell states, each `[B, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<Array2<f64>>,
    pub cell: Vec<Array2<f64>>,
}

impl DecoderState {
    pub fn select(&self, rows: &[usize]) -> DecoderState {
        DecoderState {
            hidden: self.hidden.iter().map(|h| h.select(Axis(0), rows)).collect(),
            cell: self.cell.iter().map(|c| c.select(Axis(0), rows)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `[B, V_tgt]`
    pub logits: Array2<f64>,
    pub state: DecoderState,
    /// `[B, S]`
    pub attention: Array2<f64>,
}

struct EncoderTape {
    ids: Array2<u32>,
    /// `[layer][t]`
    forward: Vec<Vec<CellCache>>,
    backward: Vec<Vec<CellCache>>,
    /// `[layer][t]` masks on the input of layer `l > 0`; empty for layer 0.
    dropout: Vec<Vec<Option<Array2<f64>>>>,
}

struct StepTape {
    prev: Vec<u32>,
    cells: Vec<CellCache>,
    /// Masks on the input of decoder layer `l > 0`, index `l - 1`.
    between: Vec<Option<Array2<f64>>>,
    top: Array2<f64>,
    query: Array2<f64>,
    weights: Array2<f64>,
    combined: Array2<f64>,
    attentional: Array2<f64>,
    out_mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
}

fn gather(table: &Array2<f64>, ids: &[u32]) -> Result<Array2<f64>, ModelError> {
    let size = table.nrows();
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= size) {
        return Err(ModelError::IdOutOfRange { id, size });
    }
    Ok(table.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>()))
}

fn scatter_add(grad: &mut Array2<f64>, ids: &[u32], rows: &Array2<f64>) {
    for (b, &id) in ids.iter().enumerate() {
        let mut dst = grad.row_mut(id as usize);
        dst += &rows.row(b);
    }
}

fn apply(mask: &Option<Array2<f64>>, x: Array2<f64>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

impl Model {
    /// Runs the bidirectional encoder over `batch.source`.
    pub fn encode_source(&self, batch: &Batch, dropout: &mut Dropout) -> Result<EncoderOutput, ModelError> {
        self.encode_taped(batch, dropout).map(|(out, _)| out)
    }

    fn encode_taped(&self, batch: &Batch, dropout: &mut Dropout) -> Result<(EncoderOutput, EncoderTape), ModelError> {
        let (bsz, slen) = batch.source.dim();
        if bsz == 0 || slen == 0 || batch.source_lengths.iter().any(|&l| l == 0) {
            return Err(ModelError::EmptySource);
        }
        let h = self.config.hidden_units;
        let p = &self.params;
        let mask = Array2::from_shape_fn((bsz, slen), |(b, t)| {
            if t < batch.source_lengths[b] {
                1.0
            } else {
                0.0
            }
        });
        let step_mask = |t: usize| mask.slice(s![.., t..t + 1]).to_owned();

        let mut inputs: Vec<Array2<f64>> = (0..slen)
            .map(|t| gather(&p.source_embedding, &batch.source.column(t).to_vec()))
            .collect::<Result<_, _>>()?;
        let mut tape = EncoderTape {
            ids: batch.source.clone(),
            forward: Vec::new(),
            backward: Vec::new(),
            dropout: Vec::new(),
        };
        let mut final_hidden = Vec::new();
        let mut final_cell = Vec::new();

        for layer in 0..self.config.layers {
            let mut masks = Vec::new();
            if layer > 0 {
                for x in inputs.iter_mut() {
                    let m = dropout.mask(bsz, 2 * h);
                    *x = apply(&m, std::mem::take(x));
                    masks.push(m);
                }
            }
            tape.dropout.push(masks);

            let wf = &p.encoder_forward[layer];
            let wb = &p.encoder_backward[layer];
            let mut out_f = Vec::with_capacity(slen);
            let mut caches_f = Vec::with_capacity(slen);
            let (mut hs, mut cs) = (Array2::zeros((bsz, h)), Array2::zeros((bsz, h)));
            for (t, x) in inputs.iter().enumerate() {
                let (hn, cn, cache) = cell_forward(wf, x.clone(), &hs, &cs, Some(step_mask(t)));
                hs = hn;
                cs = cn;
                out_f.push(hs.clone());
                caches_f.push(cache);
            }
            let (hf, cf) = (hs, cs);

            let mut out_b = vec![Array2::zeros((0, 0)); slen];
            let mut caches_b: Vec<Option<CellCache>> = (0..slen).map(|_| None).collect();
            let (mut hs, mut cs) = (Array2::zeros((bsz, h)), Array2::zeros((bsz, h)));
            for t in (0..slen).rev() {
                let (hn, cn, cache) = cell_forward(wb, inputs[t].clone(), &hs, &cs, Some(step_mask(t)));
                hs = hn;
                cs = cn;
                out_b[t] = hs.clone();
                caches_b[t] = Some(cache);
            }
            final_hidden.push(concatenate![Axis(1), hf, hs]);
            final_cell.push(concatenate![Axis(1), cf, cs]);
            tape.forward.push(caches_f);
            tape.backward.push(caches_b.into_iter().map(|c| c.expect("filled")).collect());

            inputs = out_f
                .iter()
                .zip(&out_b)
                .map(|(f, b)| concatenate(Axis(1), &[f.view(), b.view()]).expect("equal rows"))
                .collect();
        }

        let mut states = Array3::zeros((bsz, slen, 2 * h));
        for (t, x) in inputs.iter().enumerate() {
            states.slice_mut(s![.., t, ..]).assign(x);
        }
        let out = EncoderOutput {
            states,
            mask,
            final_hidden,
            final_cell,
        };
        Ok((out, tape))
    }

    /// Decoder state obtained by projecting the encoder's final states.
    pub fn initial_state(&self, enc: &EncoderOutput) -> DecoderState {
        let p = &self.params;
        let hidden = p
            .bridge
            .iter()
            .zip(&enc.final_hidden)
            .map(|(br, fh)| fh.dot(&br.hidden) + &br.hidden_bias)
            .collect();
        let cell = p
            .bridge
            .iter()
            .zip(&enc.final_cell)
            .map(|(br, fc)| fc.dot(&br.cell) + &br.cell_bias)
            .collect();
        DecoderState { hidden, cell }
    }

    /// One decoder step for every row from the previous symbols `prev`.
    /// Returns target-vocabulary logits with the updated state.
    pub fn decode_step(
        &self,
        prev: &[u32],
        state: &DecoderState,
        enc: &EncoderOutput,
        dropout: &mut Dropout,
    ) -> Result<StepOutput, ModelError> {
        self.decode_step_taped(prev, state, enc, dropout).map(|(out, _)| out)
    }

    fn decode_step_taped(
        &self,
        prev: &[u32],
        state: &DecoderState,
        enc: &EncoderOutput,
        dropout: &mut Dropout,
    ) -> Result<(StepOutput, StepTape), ModelError> {
        let p = &self.params;
        let h = self.config.hidden_units;
        let bsz = prev.len();
        if enc.batch_size() != bsz {
            return Err(ModelError::Shape(format!(
                "{} previous symbols for {} encoded rows",
                bsz,
                enc.batch_size()
            )));
        }
        let mut x = gather(&p.target_embedding, prev)?;
        let mut cells = Vec::with_capacity(self.config.layers);
        let mut between = Vec::new();
        let mut new_state = DecoderState {
            hidden: Vec::with_capacity(self.config.layers),
            cell: Vec::with_capacity(self.config.layers),
        };
        for layer in 0..self.config.layers {
            if layer > 0 {
                let m = dropout.mask(bsz, h);
                x = apply(&m, x);
                between.push(m);
            }
            let (hn, cn, cache) = cell_forward(
                &p.decoder[layer],
                x,
                &state.hidden[layer],
                &state.cell[layer],
                None,
            );
            cells.push(cache);
            x = hn.clone();
            new_state.hidden.push(hn);
            new_state.cell.push(cn);
        }
        let top = x;
        let query = top.dot(&p.attention);
        let slen = enc.states.dim().1;
        let mut weights = Array2::zeros((bsz, slen));
        let mut context = Array2::zeros((bsz, 2 * h));
        for b in 0..bsz {
            let (ctx, a) = attend_query(query.row(b), enc.row_states(b), enc.mask.row(b))?;
            weights.row_mut(b).assign(&a);
            context.row_mut(b).assign(&ctx);
        }
        let combined = concatenate![Axis(1), context, top];
        let attentional = combined.dot(&p.combine).mapv(f64::tanh);
        let out_mask = dropout.mask(bsz, h);
        let dropped = apply(&out_mask, attentional.clone());
        let logits = dropped.dot(&p.output) + &p.output_bias;

        let tape = StepTape {
            prev: prev.to_vec(),
            cells,
            between,
            top,
            query,
            weights: weights.clone(),
            combined,
            attentional,
            out_mask,
            dropped,
        };
        let out = StepOutput {
            logits,
            state: new_state,
            attention: weights,
        };
        Ok((out, tape))
    }

    /// Mean cross-entropy (nats) over the unmasked target tokens of `batch`,
    /// with teacher forcing.
    pub fn forward_loss(&self, batch: &Batch, dropout: &mut Dropout) -> Result<f64, ModelError> {
        self.run(batch, dropout, false).map(|(loss, _)| loss)
    }

    /// Loss and its exact gradient for the dropout masks realized in this call.
    pub fn backward(&self, batch: &Batch, dropout: &mut Dropout) -> Result<(f64, Gradients), ModelError> {
        self.run(batch, dropout, true)
            .map(|(loss, g)| (loss, g.expect("gradients requested")))
    }

    fn run(&self, batch: &Batch, dropout: &mut Dropout, want_grad: bool) -> Result<(f64, Option<Gradients>), ModelError> {
        let target = batch.target.as_ref().ok_or(ModelError::MissingTargets)?;
        let loss_mask = batch.loss_mask.as_ref().ok_or(ModelError::MissingTargets)?;
        let tokens = loss_mask.sum();
        if tokens == 0.0 {
            return Err(ModelError::EmptyMask);
        }
        if target.nrows() != batch.size() {
            return Err(ModelError::Shape("source and target batch sizes differ".into()));
        }
        let vocab = self.config.target_vocab_size;
        if let Some(&id) = target.iter().find(|&&id| id as usize >= vocab) {
            return Err(ModelError::IdOutOfRange { id, size: vocab });
        }

        let (enc, enc_tape) = self.encode_taped(batch, dropout)?;
        let mut state = self.initial_state(&enc);
        let steps = loss_mask.ncols();
        let mut tapes = Vec::with_capacity(steps);
        let mut d_logits_all = Vec::with_capacity(steps);
        let mut loss = 0.0;

        for t in 0..steps {
            let prev = target.column(t).to_vec();
            let (out, tape) = self.decode_step_taped(&prev, &state, &enc, dropout)?;
            let mut d_logits = Array2::zeros(out.logits.raw_dim());
            for (b, row) in out.logits.rows().into_iter().enumerate() {
                let m = loss_mask[[b, t]];
                if m == 0.0 {
                    continue;
                }
                let gold = target[[b, t + 1]] as usize;
                let max = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                loss -= m * (row[gold] - lse);
                if want_grad {
                    let mut d = d_logits.row_mut(b);
                    for (j, &x) in row.iter().enumerate() {
                        d[j] = m * (x - lse).exp() / tokens;
                    }
                    d[gold] -= m / tokens;
                }
            }
            state = out.state;
            if want_grad {
                tapes.push(tape);
                d_logits_all.push(d_logits);
            }
        }
        let loss = loss / tokens;
        if !want_grad {
            return Ok((loss, None));
        }
        let grads = self.backprop(&enc, &enc_tape, &tapes, &d_logits_all);
        Ok((loss, Some(grads)))
    }

    fn backprop(
        &self,
        enc: &EncoderOutput,
        enc_tape: &EncoderTape,
        tapes: &[StepTape],
        d_logits_all: &[Array2<f64>],
    ) -> Gradients {
        let p = &self.params;
        let h = self.config.hidden_units;
        let layers = self.config.layers;
        let mut g = Gradients::zeros(&self.config);
        let (bsz, slen, _) = enc.states.dim();
        let mut d_enc = Array3::<f64>::zeros(enc.states.raw_dim());

        let mut carry_h: Vec<Array2<f64>> = (0..layers).map(|_| Array2::zeros((bsz, h))).collect();
        let mut carry_c: Vec<Array2<f64>> = carry_h.clone();

        for (tape, d_logits) in tapes.iter().zip(d_logits_all).rev() {
            let go = &mut g.0;
            go.output += &tape.dropped.t().dot(d_logits);
            go.output_bias += &d_logits.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_att = apply(&tape.out_mask, d_logits.dot(&p.output.t()));
            let d_pre = d_att * tape.attentional.mapv(|a| 1.0 - a * a);
            go.combine += &tape.combined.t().dot(&d_pre);
            let d_combined = d_pre.dot(&p.combine.t());
            let d_context = d_combined.slice(s![.., 0..2 * h]);
            let mut d_top = d_combined.slice(s![.., 2 * h..]).to_owned();

            let mut d_query = Array2::zeros((bsz, 2 * h));
            for b in 0..bsz {
                let dq = attend_query_backward(
                    tape.query.row(b),
                    enc.row_states(b),
                    tape.weights.row(b),
                    d_context.row(b),
                    d_enc.index_axis_mut(Axis(0), b),
                );
                d_query.row_mut(b).assign(&dq);
            }
            go.attention += &tape.top.t().dot(&d_query);
            d_top += &d_query.dot(&p.attention.t());

            let mut from_above = d_top;
            for layer in (0..layers).rev() {
                let dh = &from_above + &carry_h[layer];
                let (dx, dh_prev, dc_prev) = cell_backward(
                    &p.decoder[layer],
                    &tape.cells[layer],
                    &dh,
                    &carry_c[layer],
                    &mut go.decoder[layer],
                );
                carry_h[layer] = dh_prev;
                carry_c[layer] = dc_prev;
                if layer > 0 {
                    from_above = apply(&tape.between[layer - 1], dx);
                } else {
                    scatter_add(&mut go.target_embedding, &tape.prev, &dx);
                    from_above = Array2::zeros((0, 0));
                }
            }
        }

        // Bridge: decoder initial states come from the encoder's final states.
        let mut d_final_h = Vec::with_capacity(layers);
        let mut d_final_c = Vec::with_capacity(layers);
        for layer in 0..layers {
            let br = &p.bridge[layer];
            let gb = &mut g.0.bridge[layer];
            gb.hidden += &enc.final_hidden[layer].t().dot(&carry_h[layer]);
            gb.hidden_bias += &carry_h[layer].sum_axis(Axis(0)).insert_axis(Axis(0));
            gb.cell += &enc.final_cell[layer].t().dot(&carry_c[layer]);
            gb.cell_bias += &carry_c[layer].sum_axis(Axis(0)).insert_axis(Axis(0));
            d_final_h.push(carry_h[layer].dot(&br.hidden.t()));
            d_final_c.push(carry_c[layer].dot(&br.cell.t()));
        }

        // Gradients with respect to each layer's per-position outputs.
        let mut d_out: Vec<Array2<f64>> = (0..slen)
            .map(|t| d_enc.slice(s![.., t, ..]).to_owned())
            .collect();
        for layer in (0..layers).rev() {
            let go = &mut g.0;
            let mut d_in: Vec<Array2<f64>> = Vec::with_capacity(slen);

            let mut dh = d_final_h[layer].slice(s![.., 0..h]).to_owned();
            let mut dc = d_final_c[layer].slice(s![.., 0..h]).to_owned();
            let mut dx_f = vec![Array2::zeros((0, 0)); slen];
            for t in (0..slen).rev() {
                let total = &dh + &d_out[t].slice(s![.., 0..h]);
                let (dx, dhp, dcp) = cell_backward(
                    &p.encoder_forward[layer],
                    &enc_tape.forward[layer][t],
                    &total,
                    &dc,
                    &mut go.encoder_forward[layer],
                );
                dx_f[t] = dx;
                dh = dhp;
                dc = dcp;
            }

            let mut dh = d_final_h[layer].slice(s![.., h..]).to_owned();
            let mut dc = d_final_c[layer].slice(s![.., h..]).to_owned();
            for t in 0..slen {
                let total = &dh + &d_out[t].slice(s![.., h..]);
                let (dx, dhp, dcp) = cell_backward(
                    &p.encoder_backward[layer],
                    &enc_tape.backward[layer][t],
                    &total,
                    &dc,
                    &mut go.encoder_backward[layer],
                );
                d_in.push(&dx_f[t] + &dx);
                dh = dhp;
                dc = dcp;
            }

            if layer > 0 {
                d_out = d_in
                    .into_iter()
                    .zip(&enc_tape.dropout[layer])
                    .map(|(d, m)| apply(m, d))
                    .collect();
            } else {
                for (t, d) in d_in.iter().enumerate() {
                    let ids = enc_tape.ids.column(t).to_vec();
                    scatter_add(&mut go.source_embedding, &ids, d);
                }
            }
        }
        g
    }

    /// Log-probabilities of the next symbol for each logit row.
    pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
        let mut out = logits.clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        out
    }

    /// Sum of log-probabilities of `targets` (unframed ids, end symbol
    /// appended) given `source`, under teacher forcing with dropout off.
    pub fn sequence_log_prob(&self, source: &[u32], target: &[u32]) -> Result<f64, ModelError> {
        let batch = Batch::from_sources(&[source]);
        let enc = self.encode_source(&batch, &mut Dropout::off())?;
        let mut state = self.initial_state(&enc);
        let mut prev = crate::snippets::START_ID;
        let mut total = 0.0;
        for &next in target.iter().chain(std::iter::once(&crate::snippets::END_ID)) {
            let out = self.decode_step(&[prev], &state, &enc, &mut Dropout::off())?;
            let lp: Array1<f64> = Model::log_softmax(&out.logits).row(0).to_owned();
            total += lp[next as usize];
            state = out.state;
            prev = next;
        }
        Ok(total)
    }
}
