use std::io::Read;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::params::{ClientUpdate, GlobalModel};

/// Largest payload a stream reader accepts before giving up on a frame.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("frame shorter than its 4-byte length prefix")]
    FrameTooShort,
    #[error("frame declares {declared} payload bytes but carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("frame declares {0} payload bytes, above the limit")]
    FrameTooLarge(u32),
    #[error("unknown envelope kind `{0}`")]
    UnknownKind(String),
    #[error("non-finite or non-numeric weight in payload")]
    NonFiniteWeight,
    #[error("malformed envelope: {0}")]
    MalformedJson(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    Hello,
    ModelBroadcast,
    Update,
    Ack,
    Error,
}

impl Kind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Hello" => Kind::Hello,
            "ModelBroadcast" => Kind::ModelBroadcast,
            "Update" => Kind::Update,
            "Ack" => Kind::Ack,
            "Error" => Kind::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// Kind-specific body. The kind is derived from the variant, so a payload can
/// never disagree with it.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Hello,
    ModelBroadcast(GlobalModel),
    Update(ClientUpdate),
    Ack,
    Error(ErrorBody),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub round: u64,
    pub sender: String,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct Wire {
    kind: String,
    round: u64,
    sender: String,
    payload: Value,
}

impl Envelope {
    pub fn new(round: u64, sender: impl Into<String>, payload: Payload) -> Self {
        Self {
            round,
            sender: sender.into(),
            payload,
        }
    }

    pub fn error(round: u64, sender: &str, code: &str, message: impl Into<String>) -> Self {
        Self::new(
            round,
            sender,
            Payload::Error(ErrorBody {
                code: code.into(),
                message: message.into(),
            }),
        )
    }

    pub fn kind(&self) -> Kind {
        match self.payload {
            Payload::Hello => Kind::Hello,
            Payload::ModelBroadcast(_) => Kind::ModelBroadcast,
            Payload::Update(_) => Kind::Update,
            Payload::Ack => Kind::Ack,
            Payload::Error(_) => Kind::Error,
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("payload types serialize infallibly")
}

/// Length-prefixed JSON: 4-byte big-endian payload length, then the object
/// `{kind, round, sender, payload}`.
pub fn encode(e: &Envelope) -> Vec<u8> {
    let payload = match &e.payload {
        Payload::Hello | Payload::Ack => Value::Null,
        Payload::ModelBroadcast(m) => to_value(m),
        Payload::Update(u) => to_value(u),
        Payload::Error(b) => to_value(b),
    };
    let wire = Wire {
        kind: format!("{:?}", e.kind()),
        round: e.round,
        sender: e.sender.clone(),
        payload,
    };
    let body = serde_json::to_vec(&wire).expect("wire struct serializes infallibly");
    let len = u32::try_from(body.len()).expect("envelope under 4 GiB");
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&len.to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

fn check_weights(payload: &Value, fields: &[&str]) -> Result<(), CodecError> {
    for f in fields {
        if let Some(Value::Array(xs)) = payload.get(f) {
            if xs.iter().any(|x| !x.as_f64().is_some_and(f64::is_finite)) {
                return Err(CodecError::NonFiniteWeight);
            }
        }
    }
    Ok(())
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, CodecError> {
    serde_json::from_value(v).map_err(|e| CodecError::MalformedJson(e.to_string()))
}

pub fn decode(frame: &[u8]) -> Result<Envelope, CodecError> {
    let (head, body) = frame
        .split_first_chunk::<4>()
        .ok_or(CodecError::FrameTooShort)?;
    let declared = u32::from_be_bytes(*head) as usize;
    if declared != body.len() {
        return Err(CodecError::LengthMismatch {
            declared,
            actual: body.len(),
        });
    }
    let wire: Wire =
        serde_json::from_slice(body).map_err(|e| CodecError::MalformedJson(e.to_string()))?;
    let kind = Kind::parse(&wire.kind).ok_or_else(|| CodecError::UnknownKind(wire.kind.clone()))?;
    let payload = match kind {
        Kind::Hello => Payload::Hello,
        Kind::Ack => Payload::Ack,
        Kind::ModelBroadcast => {
            check_weights(&wire.payload, &["weights"])?;
            Payload::ModelBroadcast(from_value(wire.payload)?)
        }
        Kind::Update => {
            check_weights(&wire.payload, &["weights", "pseudo_gradient"])?;
            Payload::Update(from_value(wire.payload)?)
        }
        Kind::Error => Payload::Error(from_value(wire.payload)?),
    };
    Ok(Envelope {
        round: wire.round,
        sender: wire.sender,
        payload,
    })
}

/// Reads one whole frame (prefix included) from a byte stream. `Ok(None)`
/// means the stream ended cleanly before a new frame started.
pub fn read_frame(r: &mut impl Read) -> std::io::Result<Option<Result<Vec<u8>, CodecError>>> {
    let mut head = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut head[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Ok(Some(Err(CodecError::FrameTooShort))),
            n => got += n,
        }
    }
    let declared = u32::from_be_bytes(head);
    if declared > MAX_FRAME_LEN {
        return Ok(Some(Err(CodecError::FrameTooLarge(declared))));
    }
    let mut frame = head.to_vec();
    let read = r.take(u64::from(declared)).read_to_end(&mut frame)?;
    if read != declared as usize {
        return Ok(Some(Err(CodecError::LengthMismatch {
            declared: declared as usize,
            actual: read,
        })));
    }
    Ok(Some(Ok(frame)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterVector;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ack_frame_prefix_is_json_length() {
        let frame = encode(&Envelope::new(0, "gs1", Payload::Ack));
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(len, frame.len() - 4);
        assert_eq!(
            std::str::from_utf8(&frame[4..]).unwrap(),
            r#"{"kind":"Ack","round":0,"sender":"gs1","payload":null}"#
        );
    }

    #[test]
    fn update_round_trip() {
        let u = ClientUpdate::new("c1", 2, 10, &pv(&[0.0, 0.0]), pv(&[0.1, -2.5])).unwrap();
        let e = Envelope::new(2, "c1", Payload::Update(u));
        assert_eq!(decode(&encode(&e)).unwrap(), e);
    }

    #[test]
    fn truncated_frame_is_length_mismatch() {
        let mut frame = 10u32.to_be_bytes().to_vec();
        frame.extend_from_slice(b"{\"a\":");
        assert_eq!(
            decode(&frame),
            Err(CodecError::LengthMismatch { declared: 10, actual: 5 })
        );
        assert_eq!(decode(&[0, 0, 1]), Err(CodecError::FrameTooShort));
    }

    fn raw(json: &str) -> Vec<u8> {
        let mut f = (json.len() as u32).to_be_bytes().to_vec();
        f.extend_from_slice(json.as_bytes());
        f
    }

    #[test]
    fn rejects_bad_kinds_and_weights() {
        assert_eq!(
            decode(&raw(r#"{"kind":"Gossip","round":0,"sender":"x","payload":null}"#)),
            Err(CodecError::UnknownKind("Gossip".into()))
        );
        let bad = r#"{"kind":"ModelBroadcast","round":1,"sender":"gs1","payload":{"server_id":"gs1","round":1,"weights":[1.0,null]}}"#;
        assert_eq!(decode(&raw(bad)), Err(CodecError::NonFiniteWeight));
        assert!(matches!(decode(&raw("[1,2]")), Err(CodecError::MalformedJson(_))));
        let inconsistent = r#"{"kind":"Update","round":0,"sender":"c","payload":{"client_id":"c","round":0,"sample_count":0,"weights":[1.0],"pseudo_gradient":[0.0]}}"#;
        assert!(matches!(decode(&raw(inconsistent)), Err(CodecError::MalformedJson(_))));
    }

    #[test]
    fn stream_reader() {
        let e = Envelope::new(3, "gs2", Payload::Hello);
        let mut bytes = encode(&e);
        bytes.extend(encode(&Envelope::new(4, "gs2", Payload::Ack)));
        let mut cur = std::io::Cursor::new(bytes);
        let f1 = read_frame(&mut cur).unwrap().unwrap().unwrap();
        assert_eq!(decode(&f1).unwrap(), e);
        assert!(read_frame(&mut cur).unwrap().unwrap().is_ok());
        assert!(read_frame(&mut cur).unwrap().is_none());

        let header_only = encode(&e)[..4].to_vec();
        let got = read_frame(&mut std::io::Cursor::new(header_only)).unwrap().unwrap();
        assert!(matches!(got, Err(CodecError::LengthMismatch { actual: 0, .. })));
        let huge = u32::MAX.to_be_bytes().to_vec();
        let got = read_frame(&mut std::io::Cursor::new(huge)).unwrap().unwrap();
        assert_eq!(got, Err(CodecError::FrameTooLarge(u32::MAX)));
    }

    fn arb_envelope() -> impl Strategy<Value = Envelope> {
        let weights = prop::collection::vec(-1e6f64..1e6, 1..8);
        let payload = prop_oneof![
            Just(Payload::Hello),
            Just(Payload::Ack),
            ("[a-z0-9]{1,6}", any::<u64>(), weights.clone()).prop_map(|(id, round, w)| {
                Payload::ModelBroadcast(GlobalModel { server_id: id, round, weights: pv(&w) })
            }),
            ("[a-z0-9-]{1,8}", any::<u64>(), 1u64..1000, weights).prop_flat_map(|(id, round, n, w)| {
                let dim = w.len();
                prop::collection::vec(-1e6f64..1e6, dim).prop_map(move |b| {
                    Payload::Update(ClientUpdate::new(id.clone(), round, n, &pv(&b), pv(&w)).unwrap())
                })
            }),
            (".{0,12}", ".{0,40}").prop_map(|(code, message)| Payload::Error(ErrorBody { code, message })),
        ];
        (any::<u64>(), ".{0,10}", payload).prop_map(|(round, sender, payload)| Envelope { round, sender, payload })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn round_trip(e in arb_envelope()) {
            prop_assert_eq!(decode(&encode(&e)).unwrap(), e);
        }

        #[test]
        fn mutated_length_prefix_is_rejected(e in arb_envelope(), declared in any::<u32>()) {
            let mut frame = encode(&e);
            prop_assume!(declared as usize != frame.len() - 4);
            frame[..4].copy_from_slice(&declared.to_be_bytes());
            let is_length_mismatch = matches!(decode(&frame), Err(CodecError::LengthMismatch { .. }));
            prop_assert!(is_length_mismatch);
        }

        #[test]
        fn decode_never_panics(e in arb_envelope(), edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 0..8), cut in any::<prop::sample::Index>()) {
            let mut frame = encode(&e);
            for (i, b) in edits {
                let k = i.index(frame.len());
                frame[k] = b;
            }
            let keep = cut.index(frame.len() + 1);
            let _ = decode(&frame[..keep]);
            let _ = read_frame(&mut std::io::Cursor::new(&frame[..keep]));
        }
    }
}
