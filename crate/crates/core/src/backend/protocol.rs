//! JSON wire protocol for external backends: one `POST` endpoint per operation.
//!
//! | endpoint     | request                                                   | response          |
//! |--------------|-----------------------------------------------------------|-------------------|
//! | `/assess`    | `{image_ref}`                                             | `{reasoning, raw_score}` |
//! | `/compare`   | `{image_a, image_b}`                                      | `{p_a}`           |
//! | `/summarize` | `{reasoning}`                                             | `{description}`   |
//! | `/reflect`   | `{image_ref, reasoning, initial_score, target_score}`     | `{description}`   |
//! | `/embed`     | `{text}`                                                  | `{vector: [...]}` |

use serde::{Deserialize, Serialize};

use super::{BackendError, ImageRef, QualityBackend};

pub const ASSESS: &str = "/assess";
pub const COMPARE: &str = "/compare";
pub const SUMMARIZE: &str = "/summarize";
pub const REFLECT: &str = "/reflect";
pub const EMBED: &str = "/embed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessRequest {
    pub image_ref: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessResponse {
    pub reasoning: String,
    pub raw_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRequest {
    pub image_a: ImageRef,
    pub image_b: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResponse {
    pub p_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizeRequest {
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectRequest {
    pub image_ref: ImageRef,
    pub reasoning: String,
    pub initial_score: f64,
    pub target_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionResponse {
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// Status code and JSON body produced by [`dispatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub body: String,
}

fn ok<T: Serialize>(value: &T) -> Reply {
    Reply { status: 200, body: serde_json::to_string(value).expect("response serializes") }
}

fn err(status: u16, message: impl Into<String>) -> Reply {
    Reply { status, body: serde_json::to_string(&ErrorResponse { error: message.into() }).unwrap() }
}

fn backend_err(e: BackendError) -> Reply {
    match e {
        BackendError::UnknownImage(_) | BackendError::EmptyText => err(404, e.to_string()),
        _ => err(500, e.to_string()),
    }
}

/// Serves one protocol request against `backend`.
pub fn dispatch<B: QualityBackend + ?Sized>(backend: &B, path: &str, body: &str) -> Reply {
    macro_rules! parse {
        ($t:ty) => {
            match serde_json::from_str::<$t>(body) {
                Ok(v) => v,
                Err(e) => return err(400, format!("malformed request: {e}")),
            }
        };
    }
    match path {
        ASSESS => {
            let req = parse!(AssessRequest);
            match backend.assess(&req.image_ref) {
                Ok(a) => ok(&AssessResponse { reasoning: a.reasoning, raw_score: a.raw_score }),
                Err(e) => backend_err(e),
            }
        }
        COMPARE => {
            let req = parse!(CompareRequest);
            match backend.compare(&req.image_a, &req.image_b) {
                Ok(p_a) => ok(&CompareResponse { p_a }),
                Err(e) => backend_err(e),
            }
        }
        SUMMARIZE => {
            let req = parse!(SummarizeRequest);
            match backend.summarize(&req.reasoning) {
                Ok(description) => ok(&DescriptionResponse { description }),
                Err(e) => backend_err(e),
            }
        }
        REFLECT => {
            let req = parse!(ReflectRequest);
            match backend.reflect(&req.image_ref, &req.reasoning, req.initial_score, req.target_score) {
                Ok(description) => ok(&DescriptionResponse { description }),
                Err(e) => backend_err(e),
            }
        }
        EMBED => {
            let req = parse!(EmbedRequest);
            match backend.embed(&req.text) {
                Ok(e) => ok(&EmbedResponse { vector: e.values().to_vec() }),
                Err(e) => backend_err(e),
            }
        }
        other => err(404, format!("no such endpoint `{other}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_request_golden_body() {
        let req = ReflectRequest {
            image_ref: ImageRef::new("q-17", "item-17"),
            reasoning: "Overall quality level 2 (poor).".into(),
            initial_score: 2.0,
            target_score: 4.25,
        };
        let golden = r#"{"image_ref":{"id":"q-17","payload":"item-17"},"reasoning":"Overall quality level 2 (poor).","initial_score":2.0,"target_score":4.25}"#;
        assert_eq!(serde_json::to_string(&req).unwrap(), golden);
        assert_eq!(serde_json::from_str::<ReflectRequest>(golden).unwrap(), req);
    }

    #[test]
    fn compare_request_golden_body() {
        let req = CompareRequest { image_a: ImageRef::new("a", "pa"), image_b: ImageRef::new("b", "pb") };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"image_a":{"id":"a","payload":"pa"},"image_b":{"id":"b","payload":"pb"}}"#
        );
    }
}
