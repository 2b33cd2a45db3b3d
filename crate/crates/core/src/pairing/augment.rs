//! Completing single-task records into full quadruples.
//!
//! The production pipeline asks an external language model for the missing
//! caption (understanding data) or question/answer (generation data). Here
//! that call sits behind [`AugmentationClient`]; [`StubAugmenter`] produces
//! deterministic template text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Quadruple;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("augmentation client unavailable: {0}")]
    ClientUnavailable(String),
    #[error("completion is missing `{0}`")]
    MalformedCompletion(&'static str),
    #[error("invalid augmentation request: {0}")]
    InvalidRequest(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Understanding record needs a generation prompt.
    CompleteCaption,
    /// Generation record needs a question/answer pair.
    CompleteQA,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRequest {
    pub direction: Direction,
    pub quadruple: Quadruple,
    pub template_id: String,
}

impl AugmentationRequest {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let q = &self.quadruple;
        match self.direction {
            Direction::CompleteCaption if q.question.is_empty() || q.answer.is_empty() => Err(
                AugmentError::InvalidRequest("caption completion needs question and answer"),
            ),
            Direction::CompleteQA if q.caption.is_empty() => Err(AugmentError::InvalidRequest(
                "QA completion needs a caption",
            )),
            _ => Ok(()),
        }
    }
}

/// Raw fields returned by a client. Only the fields relevant to the request
/// direction are read.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub caption: Option<String>,
    pub question: Option<String>,
    pub answer: Option<String>,
}

pub trait AugmentationClient {
    fn complete(&self, req: &AugmentationRequest) -> Result<Completion, AugmentError>;
}

/// Deterministic template client for tests and offline runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubAugmenter;

impl AugmentationClient for StubAugmenter {
    fn complete(&self, req: &AugmentationRequest) -> Result<Completion, AugmentError> {
        let q = &req.quadruple;
        Ok(match req.direction {
            Direction::CompleteCaption => Completion {
                caption: Some(format!(
                    "[{}] image {} depicting the answer '{}' to '{}'",
                    req.template_id, q.image, q.answer, q.question
                )),
                ..Default::default()
            },
            Direction::CompleteQA => Completion {
                question: Some(format!(
                    "[{}] What does image {} show?",
                    req.template_id, q.image
                )),
                answer: Some(q.caption.clone()),
                ..Default::default()
            },
        })
    }
}

/// Always fails; stands in for a client with no network access.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineAugmenter;

impl AugmentationClient for OfflineAugmenter {
    fn complete(&self, _req: &AugmentationRequest) -> Result<Completion, AugmentError> {
        Err(AugmentError::ClientUnavailable("offline".into()))
    }
}

fn required(field: Option<String>, name: &'static str) -> Result<String, AugmentError> {
    match field {
        Some(s) if !s.trim().is_empty() => Ok(s),
        _ => Err(AugmentError::MalformedCompletion(name)),
    }
}

/// Sends `req` to `client` and merges the completion into the quadruple.
pub fn request_augmentation(
    req: &AugmentationRequest,
    client: &dyn AugmentationClient,
) -> Result<Quadruple, AugmentError> {
    req.validate()?;
    let completion = client.complete(req)?;
    let mut out = req.quadruple.clone();
    match req.direction {
        Direction::CompleteCaption => out.caption = required(completion.caption, "caption")?,
        Direction::CompleteQA => {
            out.question = required(completion.question, "question")?;
            out.answer = required(completion.answer, "answer")?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Source;

    fn und_quad() -> Quadruple {
        Quadruple {
            id: "u7".into(),
            origin: Source::Understanding,
            image: "img/u7.png".into(),
            caption: String::new(),
            question: "How many cats?".into(),
            answer: "2".into(),
            task_type: None,
        }
    }

    fn gen_quad() -> Quadruple {
        Quadruple {
            id: "g3".into(),
            origin: Source::Generation,
            image: "img/g3.png".into(),
            caption: "a red cube".into(),
            question: String::new(),
            answer: String::new(),
            task_type: None,
        }
    }

    #[test]
    fn stub_completes_caption_deterministically() {
        let req = AugmentationRequest {
            direction: Direction::CompleteCaption,
            quadruple: und_quad(),
            template_id: "tpl-mc".into(),
        };
        let a = request_augmentation(&req, &StubAugmenter).unwrap();
        let b = request_augmentation(&req, &StubAugmenter).unwrap();
        assert_eq!(a, b);
        assert!(a.caption.contains("tpl-mc"));
        assert!(a.caption.contains("img/u7.png"));
        assert!(a.is_complete());
    }

    #[test]
    fn stub_completes_qa() {
        let req = AugmentationRequest {
            direction: Direction::CompleteQA,
            quadruple: gen_quad(),
            template_id: "tpl-open".into(),
        };
        let q = request_augmentation(&req, &StubAugmenter).unwrap();
        assert!(!q.question.is_empty() && !q.answer.is_empty());
    }

    struct Broken;
    impl AugmentationClient for Broken {
        fn complete(&self, _: &AugmentationRequest) -> Result<Completion, AugmentError> {
            Ok(Completion {
                question: Some("only a question".into()),
                ..Default::default()
            })
        }
    }

    #[test]
    fn error_paths() {
        let req = AugmentationRequest {
            direction: Direction::CompleteQA,
            quadruple: gen_quad(),
            template_id: "t".into(),
        };
        assert_eq!(
            request_augmentation(&req, &Broken),
            Err(AugmentError::MalformedCompletion("answer"))
        );
        assert!(matches!(
            request_augmentation(&req, &OfflineAugmenter),
            Err(AugmentError::ClientUnavailable(_))
        ));
        let bad = AugmentationRequest {
            direction: Direction::CompleteQA,
            quadruple: und_quad(),
            template_id: "t".into(),
        };
        assert!(matches!(
            request_augmentation(&bad, &StubAugmenter),
            Err(AugmentError::InvalidRequest(_))
        ));
    }
}
