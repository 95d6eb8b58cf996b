//! Protocol v1 messages.
//!
//! One JSON object per line, UTF-8, tagged by `kind`. Reals are written as
//! decimal text with 17 significant digits so that every finite `f64`,
//! subnormals included, survives the round trip exactly.

use serde::ser::{Error as _, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::BridgeError;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    Hello {
        protocol_version: u32,
    },
    Info {
        vocab_size: u32,
        /// Server-side id of the mask token; may fall inside `0..vocab_size`.
        mask_id: u32,
        max_length: usize,
        name: String,
        /// Servers may echo their version here; absent means 1.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        protocol_version: Option<u32>,
    },
    Logits {
        id: u64,
        tokens: Vec<u32>,
        masked: Vec<usize>,
    },
    Rows {
        id: u64,
        #[serde(serialize_with = "serialize_rows")]
        rows: Vec<Vec<f64>>,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        message: String,
    },
}

/// Decimal text for one real, 17 significant digits.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn serialize_rows<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
    struct Row<'a>(&'a [f64]);

    impl Serialize for Row<'_> {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(self.0.len()))?;
            for &x in self.0 {
                if !x.is_finite() {
                    return Err(S::Error::custom(format!("non-finite real {x}")));
                }
                let raw = RawValue::from_string(format_real(x)).map_err(S::Error::custom)?;
                seq.serialize_element(&raw)?;
            }
            seq.end()
        }
    }

    let mut seq = s.serialize_seq(Some(rows.len()))?;
    for r in rows {
        seq.serialize_element(&Row(r))?;
    }
    seq.end()
}

/// One line of text, without the trailing newline.
pub fn encode(msg: &Message) -> Result<String, BridgeError> {
    serde_json::to_string(msg).map_err(|e| BridgeError::Encode(e.to_string()))
}

pub fn decode(line: &str) -> Result<Message, BridgeError> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|e| BridgeError::Malformed(format!("{e}: {}", truncate(line, 200))))
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
