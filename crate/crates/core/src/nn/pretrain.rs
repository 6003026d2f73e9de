//! Recipes that give the toy LM its language knowledge before alignment:
//! plain next-token pretraining and instruction tuning on "USER: … ASSISTANT: …"
//! formatted examples (the "chat" variant).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::tokenizer::IGNORE_ID;
use crate::error::{Error, Result};
use crate::nn::lm::{LmConfig, TinyCausalLm};
use crate::nn::Parameters;
use crate::tensor::{Element, Tensor};
use crate::train::batch::{batch_gradients, ordered_map, ItemGrads, TokenStats};
use crate::train::metrics::masked_token_accuracy;
use crate::train::optim::{lr_at, AdamWConfig, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Fraction of the corpus held out for the accuracy check.
    pub holdout_fraction: f64,
    /// Minimum held-out next-token accuracy; training fails below it.
    pub accuracy_floor: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 2000,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr_max: 3e-3,
                warmup_steps: 100,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            seed: 0,
            holdout_fraction: 0.1,
            accuracy_floor: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LmTrainReport {
    pub steps: u64,
    pub final_train_loss: f64,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
}

/// One training example: input ids and per-position targets (`IGNORE_ID` for
/// unsupervised positions).
#[derive(Clone, Debug)]
struct Example {
    input: Vec<usize>,
    targets: Vec<usize>,
}

/// Next-token pretraining of a freshly initialized LM on token sequences.
pub fn pretrain_lm<E: Element>(
    corpus: &[Vec<usize>],
    lm_config: LmConfig,
    init_seed: u64,
    cfg: &LmTrainConfig,
) -> Result<(TinyCausalLm<E>, LmTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus".into()));
    }
    let examples: Vec<Example> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| Example {
            input: s[..s.len() - 1].to_vec(),
            targets: s[1..].to_vec(),
        })
        .collect();
    if examples.is_empty() {
        return Err(Error::Empty(
            "pretraining corpus has no sequence of length ≥ 2".into(),
        ));
    }
    let lm = TinyCausalLm::init(lm_config, init_seed)?;
    train_examples(lm, &examples, cfg)
}

/// Continued training on templated examples; only tokens after the assistant
/// marker are supervised.
pub fn instruction_tune<E: Element>(
    lm: &TinyCausalLm<E>,
    corpus: &[Vec<usize>],
    user_id: usize,
    assistant_id: usize,
    cfg: &LmTrainConfig,
) -> Result<(TinyCausalLm<E>, LmTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Empty("instruction corpus".into()));
    }
    let mut examples = Vec::with_capacity(corpus.len());
    for (i, seq) in corpus.iter().enumerate() {
        let u = seq.iter().position(|&t| t == user_id);
        let a = seq.iter().position(|&t| t == assistant_id);
        let a = match (u, a) {
            (Some(u), Some(a)) if u < a => a,
            _ => {
                return Err(Error::Validation(format!(
                    "instruction example {i} lacks the USER/ASSISTANT template markers"
                )))
            }
        };
        if a + 1 >= seq.len() {
            return Err(Error::Validation(format!(
                "instruction example {i} has no response after the assistant marker"
            )));
        }
        let input = seq[..seq.len() - 1].to_vec();
        let targets = (0..input.len())
            .map(|p| if p >= a { seq[p + 1] } else { IGNORE_ID })
            .collect();
        examples.push(Example { input, targets });
    }
    train_examples(lm.clone(), &examples, cfg)
}

fn train_examples<E: Element>(
    mut lm: TinyCausalLm<E>,
    examples: &[Example],
    cfg: &LmTrainConfig,
) -> Result<(TinyCausalLm<E>, LmTrainReport)> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let n_hold = ((examples.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let n_hold = n_hold.min(examples.len().saturating_sub(1));
    let (train, holdout) = examples.split_at(examples.len() - n_hold);

    let shapes = lm.param_shapes();
    let mut opt = {
        let params: Vec<&Tensor<E>> = lm.named_params().into_iter().map(|(_, t)| t).collect();
        OptimState::new(cfg.optimizer, &params)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = LmTrainReport::default();

    for step in 1..=cfg.steps {
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| &train[rng.gen_range(0..train.len())])
            .collect();
        let (grads, stats) = batch_gradients(&batch, &shapes, |ex| example_grads(&lm, ex))?;
        let loss = stats.mean_loss();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!(
                    "LM training loss {loss} (batch accuracy {:.3})",
                    stats.accuracy()
                ),
            });
        }
        let lr = lr_at(step, cfg.optimizer.warmup_steps, cfg.optimizer.lr_max);
        opt.step(&mut lm.params_mut(), &grads, lr)?;
        report.final_train_loss = loss;
        report.steps = step;
        if step % 500 == 0 {
            log::info!("lm step {step}: loss {loss:.4} acc {:.3}", stats.accuracy());
        }
    }

    let eval = evaluate(&lm, if holdout.is_empty() { train } else { holdout })?;
    report.heldout_loss = eval.mean_loss();
    report.heldout_accuracy = eval.accuracy();
    if report.heldout_accuracy < cfg.accuracy_floor {
        return Err(Error::Validation(format!(
            "held-out accuracy {:.4} below floor {:.4}",
            report.heldout_accuracy, cfg.accuracy_floor
        )));
    }
    Ok((lm, report))
}

fn example_grads<E: Element>(lm: &TinyCausalLm<E>, ex: &Example) -> Result<ItemGrads<E>> {
    let mut tape = Tape::new();
    let vars = lm.bind(&mut tape, true);
    let x = vars.embed(&mut tape, &ex.input)?;
    let logits = vars.forward(&mut tape, x)?;
    let ce = tape.cross_entropy(logits, &ex.targets, IGNORE_ID)?;
    let acc = masked_token_accuracy(tape.value(logits), &ex.targets, IGNORE_ID)?;
    let n = ce.supervised;
    let mean = tape.value(ce.loss).item().as_f64();
    let total = tape.scale(ce.loss, E::of(n as f64));
    tape.backward(total)?;
    Ok(ItemGrads {
        grads: vars.all().into_iter().map(|v| tape.grad(v)).collect(),
        stats: TokenStats {
            nll_sum: mean * n as f64,
            supervised: n,
            correct: acc.correct,
        },
    })
}

fn evaluate<E: Element>(lm: &TinyCausalLm<E>, examples: &[Example]) -> Result<TokenStats> {
    let per: Vec<Result<TokenStats>> = ordered_map(examples, |_, ex| {
        let logits = lm.logits_for_ids(&ex.input)?;
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let ce = tape.cross_entropy(l, &ex.targets, IGNORE_ID)?;
        let acc = masked_token_accuracy(&logits, &ex.targets, IGNORE_ID)?;
        Ok(TokenStats {
            nll_sum: tape.value(ce.loss).item().as_f64() * ce.supervised as f64,
            supervised: ce.supervised,
            correct: acc.correct,
        })
    });
    let mut total = TokenStats::default();
    for s in per {
        total.merge(&s?);
    }
    Ok(total)
}

/// Held-out style next-token statistics of `lm` over whole sequences.
pub fn next_token_stats<E: Element>(
    lm: &TinyCausalLm<E>,
    corpus: &[Vec<usize>],
) -> Result<TokenStats> {
    let examples: Vec<Example> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| Example {
            input: s[..s.len() - 1].to_vec(),
            targets: s[1..].to_vec(),
        })
        .collect();
    evaluate(lm, &examples)
}
