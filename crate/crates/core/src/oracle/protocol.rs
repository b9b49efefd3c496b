//! Newline-delimited JSON wire protocol for external oracles, version 1.
//!
//! ```text
//! peer -> {"proto":1,"k":1000,"kind":"probability","contrastive":true, ...}
//! us   -> {"id":7,"shape":[224,224,3],"pixels":"<base64 of little-endian f32>"}
//! peer -> {"id":7,"scores":[...],"contrast_scores":[...]}
//! peer -> {"id":7,"error":"..."}
//! ```
//!
//! Requests may be pipelined; responses are matched by `id`, not by order.
//! A peer on the same host may accept `{"id":..,"path":".."}` instead of pixels.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ContrastiveClassifier, ScoreKind};
use crate::error::{Error, Result};
use crate::image::{load_image, ImageTensor};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub proto: u32,
    pub k: usize,
    pub kind: ScoreKind,
    #[serde(default)]
    pub contrastive: bool,
    /// Anything else the peer reports (model name, normalization constants).
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Pixels { shape: [usize; 3], pixels: String },
    Path { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Scores {
        id: u64,
        scores: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        contrast_scores: Option<Vec<f64>>,
    },
    Error {
        id: Option<u64>,
        error: String,
    },
}

pub fn encode_pixels(img: &ImageTensor) -> String {
    let mut bytes = Vec::with_capacity(img.data().len() * 4);
    for &s in img.data() {
        bytes.extend_from_slice(&(s as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_pixels(shape: [usize; 3], pixels: &str) -> Result<ImageTensor> {
    let bytes = STANDARD
        .decode(pixels)
        .map_err(|e| Error::Protocol(format!("pixels are not base64: {e}")))?;
    let [h, w, c] = shape;
    if bytes.len() != h * w * c * 4 {
        return Err(Error::Protocol(format!(
            "{} pixel bytes for shape {shape:?}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ImageTensor::new(h, w, c, data)
}

pub fn encode_request(id: u64, img: &ImageTensor) -> Request {
    let (h, w, c) = img.dims();
    Request {
        id,
        payload: Payload::Pixels {
            shape: [h, w, c],
            pixels: encode_pixels(img),
        },
    }
}

pub fn write_message<T: Serialize>(writer: &mut impl Write, msg: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *writer, msg)?;
    writer.write_all(b"\n")
}

/// Serves `oracle` over one connection until the reader hits end of file.
///
/// Malformed requests get an error response and the connection stays open.
pub fn serve_connection<C: ContrastiveClassifier + ?Sized>(
    oracle: &C,
    contrastive: bool,
    extra: serde_json::Map<String, serde_json::Value>,
    reader: impl BufRead,
    mut writer: impl Write,
) -> Result<()> {
    let hello = Hello {
        proto: PROTOCOL_VERSION,
        k: oracle.categories(),
        kind: oracle.kind(),
        contrastive,
        extra,
    };
    let io_err = |e| Error::io("<oracle stream>", e);
    write_message(&mut writer, &hello).map_err(io_err)?;
    writer.flush().map_err(io_err)?;
    for line in reader.lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let response = answer(oracle, contrastive, &line);
        write_message(&mut writer, &response).map_err(io_err)?;
        writer.flush().map_err(io_err)?;
    }
    Ok(())
}

fn answer<C: ContrastiveClassifier + ?Sized>(oracle: &C, contrastive: bool, line: &str) -> Response {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
            return Response::Error {
                id,
                error: format!("bad request: {e}"),
            };
        }
    };
    let id = request.id;
    let result = (|| {
        let img = match &request.payload {
            Payload::Pixels { shape, pixels } => decode_pixels(*shape, pixels)?,
            Payload::Path { path } => load_image(path)?,
        };
        let batch = std::slice::from_ref(&img);
        if contrastive {
            let (f, fp) = oracle
                .score_contrastive(batch)?
                .pop()
                .ok_or_else(|| Error::Protocol("oracle returned nothing".into()))?;
            Ok((f.scores, Some(fp.scores)))
        } else {
            let f = oracle
                .score_batch(batch)?
                .pop()
                .ok_or_else(|| Error::Protocol("oracle returned nothing".into()))?;
            Ok::<_, Error>((f.scores, None))
        }
    })();
    match result {
        Ok((scores, contrast_scores)) => Response::Scores {
            id,
            scores,
            contrast_scores,
        },
        Err(e) => Response::Error {
            id: Some(id),
            error: e.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_encoding_is_little_endian_f32() {
        let img = ImageTensor::new(1, 2, 1, vec![1.0, 0.5]).unwrap();
        let b64 = encode_pixels(&img);
        let bytes = STANDARD.decode(&b64).unwrap();
        assert_eq!(bytes, [0, 0, 0x80, 0x3f, 0, 0, 0, 0x3f]);
        assert_eq!(decode_pixels([1, 2, 1], &b64).unwrap(), img);
        assert!(decode_pixels([1, 3, 1], &b64).is_err());
    }

    #[test]
    fn message_shapes() {
        let hello: Hello =
            serde_json::from_str(r#"{"proto":1,"k":1000,"kind":"logit","contrastive":true,"model":"x"}"#).unwrap();
        assert!(hello.contrastive);
        assert_eq!(hello.k, 1000);
        assert_eq!(hello.extra["model"], "x");

        let req = encode_request(3, &ImageTensor::filled(1, 1, 1, 0.0).unwrap());
        let text = serde_json::to_string(&req).unwrap();
        assert_eq!(text, r#"{"id":3,"shape":[1,1,1],"pixels":"AAAAAA=="}"#);
        let path_req: Request = serde_json::from_str(r#"{"id":4,"path":"/tmp/a.png"}"#).unwrap();
        assert_eq!(path_req.payload, Payload::Path { path: "/tmp/a.png".into() });

        let r: Response = serde_json::from_str(r#"{"id":3,"scores":[1.0,2.0]}"#).unwrap();
        assert_eq!(r, Response::Scores { id: 3, scores: vec![1.0, 2.0], contrast_scores: None });
        let r: Response = serde_json::from_str(r#"{"id":3,"error":"boom"}"#).unwrap();
        assert_eq!(r, Response::Error { id: Some(3), error: "boom".into() });
    }
}
