//! In-process message bus between agents: wire format, Bernoulli drops and
//! byte-exact traffic accounting.
//!
//! Message layout (little-endian):
//!
//! ```text
//! offset size field
//!      0    4 magic "OMMS"
//!      4    2 version
//!      6    1 kind (1 param, 2 rays, 3 cloud)
//!      7    4 sender
//!     11    4 receiver (u32::MAX = broadcast)
//!     15    4 round
//!     19    4 payload length
//!     23    n payload
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ProtocolError, Result};
use crate::field::wire::{put_vec3, Reader};
use crate::field::InstanceField;
use crate::geometry::Vec3;

pub const MESSAGE_MAGIC: [u8; 4] = *b"OMMS";
pub const MESSAGE_VERSION: u16 = 1;
pub const MESSAGE_HEADER_LEN: usize = 23;
pub const BROADCAST: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    ParamShare = 1,
    RayShare = 2,
    CloudShare = 3,
}

impl MessageKind {
    pub const ALL: [MessageKind; 3] = [MessageKind::ParamShare, MessageKind::RayShare, MessageKind::CloudShare];

    fn from_u8(v: u8) -> Result<Self, ProtocolError> {
        match v {
            1 => Ok(MessageKind::ParamShare),
            2 => Ok(MessageKind::RayShare),
            3 => Ok(MessageKind::CloudShare),
            k => Err(ProtocolError::Kind(k)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::ParamShare => "param_share",
            MessageKind::RayShare => "ray_share",
            MessageKind::CloudShare => "cloud_share",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: u32,
    pub receiver: u32,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn encoded_len(&self) -> usize {
        MESSAGE_HEADER_LEN + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MESSAGE_MAGIC);
        out.extend_from_slice(&MESSAGE_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.receiver.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(MESSAGE_MAGIC)?;
        let version = r.u16()?;
        if version != MESSAGE_VERSION {
            return Err(ProtocolError::Version(version).into());
        }
        let kind = MessageKind::from_u8(r.u8()?)?;
        let sender = r.u32()?;
        let receiver = r.u32()?;
        let round = r.u32()?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        if r.remaining() != 0 {
            return Err(ProtocolError::Malformed(format!("{} trailing bytes", r.remaining())).into());
        }
        Ok(Message { kind, sender, receiver, round, payload })
    }

    pub fn param_share(sender: u32, receiver: u32, round: u32, field: &InstanceField) -> Self {
        Message { kind: MessageKind::ParamShare, sender, receiver, round, payload: field.to_bytes() }
    }

    pub fn field(&self) -> Result<InstanceField> {
        self.expect(MessageKind::ParamShare)?;
        InstanceField::from_bytes(&self.payload)
    }

    pub fn rays(&self) -> Result<RayShare> {
        self.expect(MessageKind::RayShare)?;
        RayShare::from_bytes(&self.payload)
    }

    pub fn cloud(&self) -> Result<CloudShare> {
        self.expect(MessageKind::CloudShare)?;
        CloudShare::from_bytes(&self.payload)
    }

    fn expect(&self, kind: MessageKind) -> Result<()> {
        if self.kind != kind {
            return Err(ProtocolError::Malformed(format!("expected {}, got {}", kind.name(), self.kind.name())).into());
        }
        Ok(())
    }
}

/// A ray in a receiver's blind zone together with the sender's rendered
/// depth along it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedRay {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    pub seed: u64,
    pub depth: f64,
}

const SHARED_RAY_LEN: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayShare {
    pub global_id: u32,
    pub rays: Vec<SharedRay>,
}

impl RayShare {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + SHARED_RAY_LEN * self.rays.len());
        out.extend_from_slice(&self.global_id.to_le_bytes());
        out.extend_from_slice(&(self.rays.len() as u32).to_le_bytes());
        for r in &self.rays {
            put_vec3(&mut out, &r.origin);
            put_vec3(&mut out, &r.dir);
            out.extend_from_slice(&r.t_near.to_le_bytes());
            out.extend_from_slice(&r.t_far.to_le_bytes());
            out.extend_from_slice(&r.seed.to_le_bytes());
            out.extend_from_slice(&r.depth.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let global_id = r.u32()?;
        let n = r.u32()? as usize;
        if r.remaining() != n * SHARED_RAY_LEN {
            return Err(ProtocolError::Malformed(format!("{} bytes for {n} rays", r.remaining())).into());
        }
        let mut rays = Vec::with_capacity(n);
        for _ in 0..n {
            rays.push(SharedRay {
                origin: r.vec3()?,
                dir: r.vec3()?,
                t_near: r.f64()?,
                t_far: r.f64()?,
                seed: r.u64()?,
                depth: r.f64()?,
            });
        }
        Ok(RayShare { global_id, rays })
    }

    pub fn message(&self, sender: u32, receiver: u32, round: u32) -> Message {
        Message { kind: MessageKind::RayShare, sender, receiver, round, payload: self.to_bytes() }
    }
}

/// Downsampled instance cloud exchanged during alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudShare {
    pub instance_id: u32,
    /// 0 when not yet assigned.
    pub global_id: u32,
    pub points: Vec<Vec3>,
}

impl CloudShare {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 24 * self.points.len());
        out.extend_from_slice(&self.instance_id.to_le_bytes());
        out.extend_from_slice(&self.global_id.to_le_bytes());
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for p in &self.points {
            put_vec3(&mut out, p);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let instance_id = r.u32()?;
        let global_id = r.u32()?;
        let n = r.u32()? as usize;
        if r.remaining() != n * 24 {
            return Err(ProtocolError::Malformed(format!("{} bytes for {n} points", r.remaining())).into());
        }
        let points = (0..n).map(|_| r.vec3()).collect::<Result<Vec<_>, _>>()?;
        Ok(CloudShare { instance_id, global_id, points })
    }

    pub fn message(&self, sender: u32, receiver: u32, round: u32) -> Message {
        Message { kind: MessageKind::CloudShare, sender, receiver, round, payload: self.to_bytes() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    pub success_rate: f64,
    pub seed: u64,
    /// Rounds between send and delivery.
    #[serde(default)]
    pub latency: u32,
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel { success_rate: 1.0, seed: 0, latency: 0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounters {
    pub sent_messages: u64,
    pub sent_bytes: u64,
    pub delivered_messages: u64,
    pub delivered_bytes: u64,
    pub dropped_messages: u64,
}

impl KindCounters {
    fn add(&mut self, o: &KindCounters) {
        self.sent_messages += o.sent_messages;
        self.sent_bytes += o.sent_bytes;
        self.delivered_messages += o.delivered_messages;
        self.delivered_bytes += o.delivered_bytes;
        self.dropped_messages += o.dropped_messages;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficLog {
    /// `(round, kind) → counters`.
    pub rows: BTreeMap<(u32, MessageKind), KindCounters>,
}

impl TrafficLog {
    pub fn merge(&mut self, other: &TrafficLog) {
        for (k, c) in &other.rows {
            self.rows.entry(*k).or_default().add(c);
        }
    }

    pub fn total(&self) -> KindCounters {
        let mut t = KindCounters::default();
        self.rows.values().for_each(|c| t.add(c));
        t
    }

    pub fn total_for(&self, kind: MessageKind) -> KindCounters {
        let mut t = KindCounters::default();
        self.rows.iter().filter(|((_, k), _)| *k == kind).for_each(|(_, c)| t.add(c));
        t
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,kind,sent_messages,sent_bytes,delivered_messages,delivered_bytes,dropped_messages\n");
        for ((round, kind), c) in &self.rows {
            s.push_str(&format!(
                "{round},{},{},{},{},{},{}\n",
                kind.name(),
                c.sent_messages,
                c.sent_bytes,
                c.delivered_messages,
                c.delivered_bytes,
                c.dropped_messages
            ));
        }
        s
    }
}

/// Bus state: the drop stream and any in-flight messages.
#[derive(Debug, Clone)]
pub struct Channel {
    model: ChannelModel,
    rng: ChaCha8Rng,
    in_flight: Vec<(u32, Message)>,
}

impl Channel {
    pub fn new(model: ChannelModel) -> Result<Self> {
        if !(0.0..=1.0).contains(&model.success_rate) {
            return Err(Error::Config(format!("channel success_rate {} outside [0,1]", model.success_rate)));
        }
        Ok(Channel { model, rng: ChaCha8Rng::seed_from_u64(model.seed), in_flight: Vec::new() })
    }

    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    /// Sends every outbox message (broadcasts fan out to `agents` except the
    /// sender) and returns the inboxes due this round plus the traffic.
    pub fn deliver(&mut self, outbox: Vec<Message>, agents: &[u32], round: u32) -> (BTreeMap<u32, Vec<Message>>, TrafficLog) {
        let mut log = TrafficLog::default();
        for msg in outbox {
            let receivers: Vec<u32> = if msg.receiver == BROADCAST {
                agents.iter().copied().filter(|a| *a != msg.sender).collect()
            } else {
                vec![msg.receiver]
            };
            for r in receivers {
                let m = Message { receiver: r, ..msg.clone() };
                let len = m.encoded_len() as u64;
                let c = log.rows.entry((round, m.kind)).or_default();
                c.sent_messages += 1;
                c.sent_bytes += len;
                let ok = match self.model.success_rate {
                    p if p >= 1.0 => true,
                    p if p <= 0.0 => false,
                    p => self.rng.random::<f64>() < p,
                };
                if ok {
                    c.delivered_messages += 1;
                    c.delivered_bytes += len;
                    self.in_flight.push((round + self.model.latency, m));
                } else {
                    c.dropped_messages += 1;
                }
            }
        }
        let mut inboxes: BTreeMap<u32, Vec<Message>> = agents.iter().map(|a| (*a, Vec::new())).collect();
        let mut keep = Vec::new();
        for (due, m) in self.in_flight.drain(..) {
            if due <= round {
                inboxes.entry(m.receiver).or_default().push(m);
            } else {
                keep.push((due, m));
            }
        }
        self.in_flight = keep;
        (inboxes, log)
    }
}

/// One-shot delivery over a fresh channel.
pub fn deliver(outbox: Vec<Message>, channel: &ChannelModel, agents: &[u32], round: u32) -> Result<(BTreeMap<u32, Vec<Message>>, TrafficLog)> {
    Ok(Channel::new(*channel)?.deliver(outbox, agents, round))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Arch;
    use crate::geometry::Aabb;
    use proptest::prelude::*;

    fn msg(sender: u32, receiver: u32, len: usize) -> Message {
        Message { kind: MessageKind::RayShare, sender, receiver, round: 3, payload: vec![7; len] }
    }

    #[test]
    fn param_share_length_is_exact() {
        let f = InstanceField::new(Arch::default(), Aabb::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)), 4, 0, 0.0).unwrap();
        let m = Message::param_share(0, 1, 0, &f);
        let expected = MESSAGE_HEADER_LEN + crate::field::FIELD_HEADER_LEN + 8 * 2468;
        assert_eq!(m.to_bytes().len(), expected);
        assert_eq!(Message::from_bytes(&m.to_bytes()).unwrap().field().unwrap(), f);
    }

    #[test]
    fn truncation_and_corruption_are_typed() {
        let bytes = msg(1, 2, 10).to_bytes();
        for cut in 0..bytes.len() {
            assert!(matches!(Message::from_bytes(&bytes[..cut]), Err(Error::Protocol(ProtocolError::Truncated { .. }))));
        }
        let mut b = bytes.clone();
        b[6] = 9;
        assert!(matches!(Message::from_bytes(&b), Err(Error::Protocol(ProtocolError::Kind(9)))));
        let mut b = bytes.clone();
        b[1] = b'X';
        assert!(matches!(Message::from_bytes(&b), Err(Error::Protocol(ProtocolError::BadMagic { .. }))));
        let mut b = bytes;
        b[4] = 2;
        assert!(matches!(Message::from_bytes(&b), Err(Error::Protocol(ProtocolError::Version(2)))));
        assert!(msg(0, 1, 0).field().is_err());
    }

    #[test]
    fn payload_round_trips() {
        let rs = RayShare {
            global_id: 3,
            rays: vec![SharedRay { origin: Vec3::new(1.0, 2.0, 3.0), dir: Vec3::z(), t_near: 0.5, t_far: 2.0, seed: 99, depth: 1.25 }],
        };
        assert_eq!(rs.message(0, 1, 0).rays().unwrap(), rs);
        let cs = CloudShare { instance_id: 2, global_id: 0, points: vec![Vec3::new(0.1, 0.2, 0.3); 4] };
        assert_eq!(cs.message(0, 1, 0).cloud().unwrap(), cs);
        assert!(RayShare::from_bytes(&rs.to_bytes()[..20]).is_err());
    }

    #[test]
    fn extreme_rates() {
        let out: Vec<Message> = (0..20).map(|i| msg(0, 1, i)).collect();
        let (inbox, log) = deliver(out.clone(), &ChannelModel::default(), &[0, 1], 0).unwrap();
        assert_eq!(inbox[&1].len(), 20);
        assert_eq!(log.total().dropped_messages, 0);
        let (inbox, log) = deliver(out.clone(), &ChannelModel { success_rate: 0.0, ..Default::default() }, &[0, 1], 0).unwrap();
        assert!(inbox[&1].is_empty());
        let t = log.total();
        assert_eq!(t.sent_messages, 20);
        assert_eq!(t.sent_bytes, out.iter().map(|m| m.encoded_len() as u64).sum::<u64>());
        assert_eq!(t.delivered_bytes, 0);
        assert!(Channel::new(ChannelModel { success_rate: 1.5, ..Default::default() }).is_err());
    }

    #[test]
    fn broadcast_fans_out_and_latency_delays() {
        let mut ch = Channel::new(ChannelModel { latency: 1, ..Default::default() }).unwrap();
        let (inbox, log) = ch.deliver(vec![msg(0, BROADCAST, 4)], &[0, 1, 2], 0);
        assert!(inbox.values().all(|v| v.is_empty()));
        assert_eq!(log.total().sent_messages, 2);
        let (inbox, _) = ch.deliver(Vec::new(), &[0, 1, 2], 1);
        assert_eq!(inbox[&1].len(), 1);
        assert_eq!(inbox[&2][0].receiver, 2);
        assert!(inbox[&0].is_empty());
    }

    #[test]
    fn in_stream_order_is_preserved() {
        let out: Vec<Message> = (0..50).map(|i| Message { round: i, ..msg(0, 1, 1) }).collect();
        let (inbox, _) = deliver(out, &ChannelModel { success_rate: 0.5, seed: 3, latency: 0 }, &[0, 1], 0).unwrap();
        assert!(inbox[&1].windows(2).all(|w| w[0].round < w[1].round));
    }

    #[test]
    fn csv_has_one_row_per_round_and_kind() {
        let mut log = TrafficLog::default();
        let (_, a) = deliver(vec![msg(0, 1, 1)], &ChannelModel::default(), &[0, 1], 0).unwrap();
        let (_, b) = deliver(vec![msg(0, 1, 1)], &ChannelModel::default(), &[0, 1], 1).unwrap();
        log.merge(&a);
        log.merge(&b);
        assert_eq!(log.to_csv().lines().count(), 3);
        assert_eq!(log.total_for(MessageKind::RayShare).sent_messages, 2);
    }

    proptest! {
        #[test]
        fn message_round_trip(kind in 1u8..=3, sender in any::<u32>(), receiver in any::<u32>(), round in any::<u32>(),
                              payload in prop::collection::vec(any::<u8>(), 0..300)) {
            let m = Message { kind: MessageKind::from_u8(kind).unwrap(), sender, receiver, round, payload };
            let b = m.to_bytes();
            prop_assert_eq!(b.len(), m.encoded_len());
            prop_assert_eq!(Message::from_bytes(&b).unwrap(), m);
        }

        #[test]
        fn same_seed_same_drops(seed in any::<u64>()) {
            let out: Vec<Message> = (0..64).map(|i| msg(0, 1, i % 5)).collect();
            let model = ChannelModel { success_rate: 0.5, seed, latency: 0 };
            let a = deliver(out.clone(), &model, &[0, 1], 0).unwrap();
            let b = deliver(out, &model, &[0, 1], 0).unwrap();
            prop_assert_eq!(a.0, b.0);
            prop_assert_eq!(a.1, b.1);
        }
    }
}
