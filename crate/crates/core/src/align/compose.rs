//! Template composition: `USER: <speech> <prompt> ASSISTANT: <transcript>`.
//!
//! The text parts are token ids embedded through the LM's table; the speech
//! part is a block of projected rows spliced in between. In training mode the
//! targets are the next-token ids over the transcript span followed by EOS,
//! and `IGNORE_ID` everywhere else.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::tokenizer::{Tokenizer, ASSISTANT_MARKER, EOS_ID, IGNORE_ID, USER_MARKER};
use crate::error::{Error, Result};
use crate::nn::lm::{LmVars, TinyCausalLm};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComposeMode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Prefix,
    Speech,
    Prompt,
    AssistantTag,
    Transcript,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

/// Literal marker texts around the speech and the answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub prefix: String,
    pub assistant_tag: String,
}

impl Default for Template {
    fn default() -> Self {
        Template {
            prefix: USER_MARKER.to_uppercase(),
            assistant_tag: ASSISTANT_MARKER.to_uppercase(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedSequence {
    pub prefix_ids: Vec<usize>,
    pub speech_rows: usize,
    /// Prompt tokens followed by the assistant tag.
    pub prompt_tag_ids: Vec<usize>,
    /// Transcript tokens fed as input (train mode only).
    pub transcript_ids: Vec<usize>,
    /// One entry per position; `IGNORE_ID` outside transcript + EOS.
    pub targets: Vec<usize>,
    /// Non-empty spans in order, partitioning `0..len()`.
    pub segments: Vec<Segment>,
}

impl ComposedSequence {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_ID).count()
    }

    /// Builds the `[L × d_llm]` input on `tape` around an already projected
    /// speech block.
    pub fn assemble<E: Element>(
        &self,
        tape: &mut Tape<E>,
        lm: &LmVars,
        speech: Var,
    ) -> Result<Var> {
        let (n, _) = tape.value(speech).dims2()?;
        if n != self.speech_rows {
            return Err(Error::Contract(format!(
                "composed for {} speech rows, given {n}",
                self.speech_rows
            )));
        }
        let mut parts = vec![lm.embed(tape, &self.prefix_ids)?, speech];
        parts.push(lm.embed(tape, &self.prompt_tag_ids)?);
        if !self.transcript_ids.is_empty() {
            parts.push(lm.embed(tape, &self.transcript_ids)?);
        }
        tape.concat_rows(&parts)
    }

    /// Concrete embeddings, no gradients kept.
    pub fn embeddings<E: Element>(
        &self,
        lm: &TinyCausalLm<E>,
        speech: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let vars = lm.bind(&mut tape, false);
        let s = tape.constant(speech.clone());
        let x = self.assemble(&mut tape, &vars, s)?;
        Ok(tape.value(x).clone())
    }
}

/// Lays out one utterance. `max_positions` bounds the composed length.
pub fn compose(
    speech_rows: usize,
    prompt: &str,
    transcript: Option<&str>,
    tok: &Tokenizer,
    template: &Template,
    mode: ComposeMode,
    max_positions: usize,
) -> Result<ComposedSequence> {
    if speech_rows == 0 {
        return Err(Error::EmptySpeech(
            "no projected speech rows (fewer frames than the downsample factor)".into(),
        ));
    }
    let prefix_ids = tok.tokenize(&template.prefix);
    let prompt_ids = tok.tokenize(prompt);
    let tag_ids = tok.tokenize(&template.assistant_tag);
    if prefix_ids.is_empty() || tag_ids.is_empty() {
        return Err(Error::config(
            "template",
            "prefix and assistant tag must be non-empty",
        ));
    }
    let transcript_ids = match (mode, transcript) {
        (ComposeMode::Train, Some(t)) => tok.tokenize(t),
        (ComposeMode::Train, None) => {
            return Err(Error::Contract(
                "train-mode composition needs a transcript".into(),
            ))
        }
        (ComposeMode::Infer, _) => Vec::new(),
    };

    let mut segments = Vec::new();
    let mut at = 0;
    for (kind, len) in [
        (SegmentKind::Prefix, prefix_ids.len()),
        (SegmentKind::Speech, speech_rows),
        (SegmentKind::Prompt, prompt_ids.len()),
        (SegmentKind::AssistantTag, tag_ids.len()),
        (SegmentKind::Transcript, transcript_ids.len()),
    ] {
        if len > 0 {
            segments.push(Segment {
                kind,
                start: at,
                len,
            });
            at += len;
        }
    }
    let len = at;
    if len > max_positions {
        return Err(Error::Length {
            len,
            max: max_positions,
        });
    }

    let mut targets = vec![IGNORE_ID; len];
    if mode == ComposeMode::Train {
        // the last tag position predicts the first transcript token
        let first = len - transcript_ids.len() - 1;
        for (i, &t) in transcript_ids.iter().chain([EOS_ID].iter()).enumerate() {
            targets[first + i] = t;
        }
    }
    let mut prompt_tag_ids = prompt_ids;
    prompt_tag_ids.extend(tag_ids);
    Ok(ComposedSequence {
        prefix_ids,
        speech_rows,
        prompt_tag_ids,
        transcript_ids,
        targets,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(["a b c d e f g", "transcribe speech to text."])
    }

    #[test]
    fn lengths_and_supervision_count() {
        let t = tok();
        let tpl = Template {
            prefix: "USER: a b c".into(),
            assistant_tag: "ASSISTANT:".into(),
        };
        let c = compose(3, "d e f g", Some("a b"), &t, &tpl, ComposeMode::Train, 256).unwrap();
        assert_eq!(c.len(), 14);
        assert_eq!(c.supervised(), 3);
        assert_eq!(
            &c.targets[11..],
            &[t.id("a").unwrap(), t.id("b").unwrap(), EOS_ID]
        );
        let i = compose(3, "d e f g", None, &t, &tpl, ComposeMode::Infer, 256).unwrap();
        assert_eq!(i.len(), 12);
        assert_eq!(i.supervised(), 0);
    }

    #[test]
    fn empty_prompt_keeps_only_markers() {
        let t = tok();
        let c = compose(
            2,
            "",
            None,
            &t,
            &Template::default(),
            ComposeMode::Infer,
            256,
        )
        .unwrap();
        let kinds: Vec<_> = c.segments.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            [
                SegmentKind::Prefix,
                SegmentKind::Speech,
                SegmentKind::AssistantTag
            ]
        );
        assert_eq!(c.prompt_tag_ids, vec![t.assistant_id()]);
    }

    #[test]
    fn segments_partition_the_sequence() {
        let t = tok();
        let c = compose(
            4,
            "transcribe speech to text.",
            Some("a b c"),
            &t,
            &Template::default(),
            ComposeMode::Train,
            256,
        )
        .unwrap();
        let mut at = 0;
        for s in &c.segments {
            assert_eq!(s.start, at);
            at += s.len;
        }
        assert_eq!(at, c.len());
    }

    #[test]
    fn errors() {
        let t = tok();
        let tpl = Template::default();
        assert!(matches!(
            compose(0, "", Some("a"), &t, &tpl, ComposeMode::Train, 256),
            Err(Error::EmptySpeech(_))
        ));
        assert!(matches!(
            compose(10, "", Some("a"), &t, &tpl, ComposeMode::Train, 8),
            Err(Error::Length { len: 13, max: 8 })
        ));
        assert!(compose(1, "", None, &t, &tpl, ComposeMode::Train, 8).is_err());
    }
}
