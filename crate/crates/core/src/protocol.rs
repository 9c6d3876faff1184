//! Management-traffic messages: types, header layout and size accounting.
//!
//! Header layout (LSB first): 8-bit type, `ceil(log2(nodes))`-bit source,
//! same-width destination, 4-bit priority, 1-bit broadcast flag. The header
//! is padded to a whole number of 32-bit words; data words follow.

use std::fmt;

use thiserror::Error;

pub const WORD_BITS: u32 = 32;
const TYPE_BITS: u32 = 8;
const PRIO_BITS: u32 = 4;
const FLAG_BITS: u32 = 1;

pub const PRIO_DEFAULT: u8 = 0;
pub const PRIO_MAX: u8 = 15;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("{mtype} expects {expected} data words, got {got}")]
    SchemaViolation {
        mtype: MessageType,
        expected: usize,
        got: usize,
    },
    #[error("priority {0} out of range 0..=15")]
    Priority(u8),
    #[error("{0} cannot be broadcast")]
    BroadcastNotAllowed(MessageType),
    #[error("unknown message type code {0}")]
    UnknownType(u32),
    #[error("address {0} does not name a node")]
    UnknownAddress(u32),
    #[error("truncated message: {0} words")]
    Truncated(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    /// Global management node.
    Gmn,
    /// Local controller (and its coupled PE).
    Lc,
    /// Off-chip stimulus port attached to the global bus.
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeAddress {
    pub kind: NodeKind,
    pub index: u32,
}

impl NodeAddress {
    pub const HOST: NodeAddress = NodeAddress {
        kind: NodeKind::Host,
        index: 0,
    };

    pub fn gmn(index: u32) -> Self {
        NodeAddress {
            kind: NodeKind::Gmn,
            index,
        }
    }

    pub fn lc(index: u32) -> Self {
        NodeAddress {
            kind: NodeKind::Lc,
            index,
        }
    }

    pub fn is_gmn(self) -> bool {
        self.kind == NodeKind::Gmn
    }
}

impl fmt::Display for NodeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NodeKind::Gmn => write!(f, "gmn{}", self.index),
            NodeKind::Lc => write!(f, "lc{}", self.index),
            NodeKind::Host => write!(f, "host"),
        }
    }
}

/// Flat numbering of every addressable node of one chip: GMNs first, then
/// LCs, then the host port.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressMap {
    pub gmns: u32,
    pub lcs: u32,
}

impl AddressMap {
    pub fn new(gmns: u32, lcs: u32) -> Self {
        AddressMap { gmns, lcs }
    }

    pub fn num_nodes(&self) -> u32 {
        self.gmns + self.lcs + 1
    }

    pub fn flat(&self, a: NodeAddress) -> u32 {
        match a.kind {
            NodeKind::Gmn => a.index,
            NodeKind::Lc => self.gmns + a.index,
            NodeKind::Host => self.gmns + self.lcs,
        }
    }

    pub fn unflat(&self, id: u32) -> Result<NodeAddress, ProtocolError> {
        if id < self.gmns {
            Ok(NodeAddress::gmn(id))
        } else if id < self.gmns + self.lcs {
            Ok(NodeAddress::lc(id - self.gmns))
        } else if id == self.gmns + self.lcs {
            Ok(NodeAddress::HOST)
        } else {
            Err(ProtocolError::UnknownAddress(id))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageType {
    RcsvSpwn,
    RcsvExit,
    JoinInit,
    JoinFree,
    JoinWait,
    JoinExit,
    TaskStart,
    StatusBeacon,
    SyscallReply,
}

impl MessageType {
    pub const ALL: [MessageType; 9] = [
        MessageType::RcsvSpwn,
        MessageType::RcsvExit,
        MessageType::JoinInit,
        MessageType::JoinFree,
        MessageType::JoinWait,
        MessageType::JoinExit,
        MessageType::TaskStart,
        MessageType::StatusBeacon,
        MessageType::SyscallReply,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Result<Self, ProtocolError> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or(ProtocolError::UnknownType(code))
    }

    /// Fixed number of data words carried by this type.
    pub fn data_words(self) -> usize {
        match self {
            MessageType::RcsvSpwn => 3,
            MessageType::TaskStart => 2,
            MessageType::RcsvExit
            | MessageType::JoinInit
            | MessageType::JoinFree
            | MessageType::JoinWait
            | MessageType::JoinExit
            | MessageType::StatusBeacon
            | MessageType::SyscallReply => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageType::RcsvSpwn => "rcsv-spwn",
            MessageType::RcsvExit => "rcsv-exit",
            MessageType::JoinInit => "join-init",
            MessageType::JoinFree => "join-free",
            MessageType::JoinWait => "join-wait",
            MessageType::JoinExit => "join-exit",
            MessageType::TaskStart => "task-start",
            MessageType::StatusBeacon => "status-beacon",
            MessageType::SyscallReply => "syscall-reply",
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub mtype: MessageType,
    pub src: NodeAddress,
    pub dst: NodeAddress,
    pub prio: u8,
    pub broadcast: bool,
    pub data: Vec<u32>,
}

impl Message {
    pub fn word(&self, i: usize) -> u32 {
        self.data[i]
    }
}

/// Build a validated message.
pub fn make_message(
    mtype: MessageType,
    src: NodeAddress,
    dst: NodeAddress,
    prio: u8,
    broadcast: bool,
    data: Vec<u32>,
) -> Result<Message, ProtocolError> {
    if data.len() != mtype.data_words() {
        return Err(ProtocolError::SchemaViolation {
            mtype,
            expected: mtype.data_words(),
            got: data.len(),
        });
    }
    if prio > PRIO_MAX {
        return Err(ProtocolError::Priority(prio));
    }
    if broadcast && mtype != MessageType::StatusBeacon {
        return Err(ProtocolError::BroadcastNotAllowed(mtype));
    }
    Ok(Message {
        mtype,
        src,
        dst,
        prio,
        broadcast,
        data,
    })
}

/// Payload of a status beacon: the sender's mapped-task total in the low half
/// word and its active helper count in the high half, both saturating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BeaconPayload {
    pub total: u32,
    pub helpers: u32,
}

impl BeaconPayload {
    pub fn pack(self) -> u32 {
        (self.total.min(0xffff)) | (self.helpers.min(0xffff) << 16)
    }

    pub fn unpack(word: u32) -> Self {
        BeaconPayload {
            total: word & 0xffff,
            helpers: word >> 16,
        }
    }
}

fn addr_bits(num_nodes: u32) -> u32 {
    assert!(num_nodes >= 1, "a chip has at least one node");
    // ceil(log2(n)); a single node still needs no address bits.
    32 - (num_nodes - 1).leading_zeros()
}

/// Header size in bits, padded to a multiple of 32.
pub fn header_bit_width(num_nodes: u32) -> u32 {
    let raw = TYPE_BITS + 2 * addr_bits(num_nodes) + PRIO_BITS + FLAG_BITS;
    raw.div_ceil(WORD_BITS) * WORD_BITS
}

pub fn header_words(num_nodes: u32) -> usize {
    (header_bit_width(num_nodes) / WORD_BITS) as usize
}

pub fn message_word_count(msg: &Message, num_nodes: u32) -> Result<usize, ProtocolError> {
    if msg.data.len() != msg.mtype.data_words() {
        return Err(ProtocolError::SchemaViolation {
            mtype: msg.mtype,
            expected: msg.mtype.data_words(),
            got: msg.data.len(),
        });
    }
    Ok(header_words(num_nodes) + msg.data.len())
}

/// Serialize to 32-bit words (header words, then data).
pub fn encode(msg: &Message, map: &AddressMap) -> Vec<u32> {
    let a = addr_bits(map.num_nodes());
    let mut h: u128 = msg.mtype.code() as u128;
    let mut shift = TYPE_BITS;
    h |= (map.flat(msg.src) as u128) << shift;
    shift += a;
    h |= (map.flat(msg.dst) as u128) << shift;
    shift += a;
    h |= ((msg.prio & 0x0f) as u128) << shift;
    shift += PRIO_BITS;
    h |= (msg.broadcast as u128) << shift;

    let hw = header_words(map.num_nodes());
    let mut words = Vec::with_capacity(hw + msg.data.len());
    for i in 0..hw {
        words.push((h >> (32 * i)) as u32);
    }
    words.extend_from_slice(&msg.data);
    words
}

pub fn decode(words: &[u32], map: &AddressMap) -> Result<Message, ProtocolError> {
    let hw = header_words(map.num_nodes());
    if words.len() < hw {
        return Err(ProtocolError::Truncated(words.len()));
    }
    let mut h: u128 = 0;
    for (i, w) in words[..hw].iter().enumerate() {
        h |= (*w as u128) << (32 * i);
    }
    let a = addr_bits(map.num_nodes());
    let field = |shift: u32, bits: u32| -> u32 { ((h >> shift) & ((1u128 << bits) - 1)) as u32 };
    let mtype = MessageType::from_code(field(0, TYPE_BITS))?;
    let src = map.unflat(field(TYPE_BITS, a))?;
    let dst = map.unflat(field(TYPE_BITS + a, a))?;
    let prio = field(TYPE_BITS + 2 * a, PRIO_BITS) as u8;
    let broadcast = field(TYPE_BITS + 2 * a + PRIO_BITS, FLAG_BITS) == 1;
    make_message(mtype, src, dst, prio, broadcast, words[hw..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_width_examples() {
        assert_eq!(header_bit_width(272), 32);
        assert_eq!(header_bit_width(2), 32);
        assert_eq!(header_bit_width(65536), 64);
        assert_eq!(header_bit_width(1), 32);
    }

    #[test]
    fn word_counts_at_272_nodes() {
        let g = NodeAddress::gmn(0);
        let l = NodeAddress::lc(3);
        let ts = make_message(MessageType::TaskStart, g, l, 0, false, vec![7, 0x1000]).unwrap();
        assert_eq!(message_word_count(&ts, 272).unwrap(), 3);
        let b = make_message(MessageType::StatusBeacon, g, g, 0, true, vec![12]).unwrap();
        assert_eq!(message_word_count(&b, 272).unwrap(), 2);
        let ji = make_message(MessageType::JoinInit, l, g, 0, false, vec![100]).unwrap();
        assert_eq!(message_word_count(&ji, 272).unwrap(), 2);
    }

    #[test]
    fn malformed_data_is_rejected() {
        let g = NodeAddress::gmn(0);
        let l = NodeAddress::lc(0);
        assert!(make_message(MessageType::JoinExit, l, g, 0, false, vec![5]).is_ok());
        let err = make_message(MessageType::RcsvSpwn, l, g, 0, false, vec![1, 2]).unwrap_err();
        assert_eq!(
            err,
            ProtocolError::SchemaViolation {
                mtype: MessageType::RcsvSpwn,
                expected: 3,
                got: 2
            }
        );
        let bad = Message {
            mtype: MessageType::JoinInit,
            src: l,
            dst: g,
            prio: 0,
            broadcast: false,
            data: vec![],
        };
        assert!(message_word_count(&bad, 272).is_err());
        assert!(make_message(MessageType::JoinInit, l, g, 16, false, vec![1]).is_err());
        assert!(make_message(MessageType::TaskStart, g, l, 0, true, vec![1, 2]).is_err());
    }

    #[test]
    fn every_data_carrying_type_has_at_least_two_words() {
        for t in MessageType::ALL {
            assert!(header_words(2) + t.data_words() >= 2);
        }
    }

    #[test]
    fn beacon_payload_packs_both_halves() {
        let p = BeaconPayload {
            total: 12,
            helpers: 3,
        };
        assert_eq!(BeaconPayload::unpack(p.pack()), p);
        let sat = BeaconPayload {
            total: 70_000,
            helpers: 1,
        };
        assert_eq!(BeaconPayload::unpack(sat.pack()).total, 0xffff);
    }

    fn arb_message(map: AddressMap) -> impl Strategy<Value = Message> {
        let n = map.num_nodes();
        (0usize..9, 0..n, 0..n, 0u8..=15, any::<bool>(), any::<[u32; 3]>()).prop_map(
            move |(t, s, d, prio, bc, data)| {
                let mtype = MessageType::ALL[t];
                let broadcast = bc && mtype == MessageType::StatusBeacon;
                make_message(
                    mtype,
                    map.unflat(s).unwrap(),
                    map.unflat(d).unwrap(),
                    prio,
                    broadcast,
                    data[..mtype.data_words()].to_vec(),
                )
                .unwrap()
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn encode_decode_round_trip(
            (map, msg) in prop_oneof![
                Just(AddressMap::new(16, 256)),
                Just(AddressMap::new(1, 4)),
                Just(AddressMap::new(4096, 65536)),
            ].prop_flat_map(|m| (Just(m), arb_message(m)))
        ) {
            let words = encode(&msg, &map);
            prop_assert_eq!(words.len(), message_word_count(&msg, map.num_nodes()).unwrap());
            prop_assert_eq!(decode(&words, &map).unwrap(), msg);
        }
    }
}
