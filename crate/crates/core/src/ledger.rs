//! Hash-linked chains: one public chain, any number of child chains whose
//! tips are periodically anchored on the public chain.
//!
//! Block production is deliberately simple. The public chain rotates through
//! a fixed producer list (`producers[tick % n]`); a child chain accepts blocks
//! only from its current manager, and `failover` promotes the first backup.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader, Writer};
pub use crate::hash::{Hash, HASH_ALG_SHA256};
use crate::identity::{self, KeyPair, PublicKey, Signature};
use crate::txvocab::{build_tx, check_tx, ChainView, Overlay, TxBody, TxEnvelope, TxPolicy, TxRejection};

/// Leading byte of a chain dump file.
pub const DUMP_FORMAT_VERSION: u8 = 1;

/// Default number of ticks between anchors of a child chain.
pub const DEFAULT_ANCHOR_PERIOD: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("block producer is not allowed to produce at this height/tick")]
    InvalidProducer,
    #[error("transaction {index} rejected: {reason}")]
    InvalidTx { index: usize, reason: TxRejection },
    #[error("tick {tick} does not advance past the chain tip")]
    NonMonotonicTick { tick: u64 },
    #[error("tick {tick} is not a multiple of anchor period {period}")]
    NotAnchorTick { tick: u64, period: u64 },
    #[error("child chain has no blocks to anchor")]
    EmptyChild,
    #[error("no backup manager available")]
    NoBackupAvailable,
    #[error("operation requires a child chain")]
    NotChildChain,
    #[error("signer is not the chain manager")]
    NotManager,
    #[error("invalid chain configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("malformed chain dump: {0}")]
    Decode(#[from] DecodeError),
    #[error("chain dump checksum mismatch")]
    ChecksumMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum ChainKind {
    Public = 0,
    Child = 1,
}

/// Commitment of a child chain tip, carried by an anchor transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainAnchor {
    pub child_chain_id: String,
    pub anchored_height: u64,
    pub anchored_hash: Hash,
    pub tick: u64,
}

impl Encode for ChainAnchor {
    fn encode(&self, w: &mut Writer) {
        w.str(&self.child_chain_id)
            .u64(self.anchored_height)
            .put(&self.anchored_hash)
            .u64(self.tick);
    }
}

impl Decode for ChainAnchor {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ChainAnchor {
            child_chain_id: r.string()?,
            anchored_height: r.u64()?,
            anchored_hash: r.get()?,
            tick: r.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Hash,
    pub timestamp: u64,
    pub txs: Vec<TxEnvelope>,
    pub producer: PublicKey,
    /// Hash of the header: algorithm id, height, prev_hash, timestamp,
    /// transactions and producer.
    pub block_hash: Hash,
    /// Producer signature over `block_hash`.
    pub producer_sig: Signature,
}

fn encode_header(
    w: &mut Writer,
    height: u64,
    prev_hash: &Hash,
    timestamp: u64,
    txs: &[TxEnvelope],
    producer: &PublicKey,
) {
    w.u8(HASH_ALG_SHA256).u64(height).put(prev_hash).u64(timestamp);
    w.len(txs.len());
    for tx in txs {
        w.bytes(&tx.to_canonical_bytes());
    }
    w.put(producer);
}

impl Block {
    pub fn compute_hash(&self) -> Hash {
        let mut w = Writer::new();
        encode_header(
            &mut w,
            self.height,
            &self.prev_hash,
            self.timestamp,
            &self.txs,
            &self.producer,
        );
        Hash::digest(w.as_slice())
    }

    pub fn signature_valid(&self) -> bool {
        identity::verify(&self.producer, self.block_hash.as_bytes(), &self.producer_sig)
    }
}

impl Encode for Block {
    fn encode(&self, w: &mut Writer) {
        encode_header(
            w,
            self.height,
            &self.prev_hash,
            self.timestamp,
            &self.txs,
            &self.producer,
        );
        w.put(&self.block_hash).put(&self.producer_sig);
    }
}

impl Decode for Block {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let alg = r.u8()?;
        if alg != HASH_ALG_SHA256 {
            return Err(DecodeError::InvalidTag {
                what: "hash algorithm",
                tag: alg,
            });
        }
        let height = r.u64()?;
        let prev_hash = r.get()?;
        let timestamp = r.u64()?;
        let n = r.len(4)?;
        let mut txs = Vec::with_capacity(n);
        for _ in 0..n {
            txs.push(TxEnvelope::from_canonical_bytes(r.bytes()?)?);
        }
        Ok(Block {
            height,
            prev_hash,
            timestamp,
            txs,
            producer: r.get()?,
            block_hash: r.get()?,
            producer_sig: r.get()?,
        })
    }
}

/// Manager of a child chain from `from_height` until the next term starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManagerTerm {
    pub from_height: u64,
    pub manager: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Governance {
    Public {
        producers: Vec<PublicKey>,
    },
    Child {
        manager: PublicKey,
        backups: Vec<PublicKey>,
        anchor_period: u64,
        terms: Vec<ManagerTerm>,
    },
}

#[derive(Debug, Clone)]
pub struct Chain {
    chain_id: String,
    governance: Governance,
    policy: TxPolicy,
    blocks: Vec<Block>,
    /// signer -> (block index, tx index) of its latest transaction
    signer_index: BTreeMap<PublicKey, (usize, usize)>,
}

impl PartialEq for Chain {
    fn eq(&self, other: &Self) -> bool {
        self.chain_id == other.chain_id
            && self.governance == other.governance
            && self.policy == other.policy
            && self.blocks == other.blocks
    }
}

impl Chain {
    pub fn public(
        chain_id: impl Into<String>,
        producers: Vec<PublicKey>,
        policy: TxPolicy,
    ) -> Result<Self, LedgerError> {
        if producers.is_empty() {
            return Err(LedgerError::InvalidConfig("public chain needs at least one producer"));
        }
        Ok(Self::with_governance(
            chain_id.into(),
            Governance::Public { producers },
            policy,
        ))
    }

    pub fn child(
        chain_id: impl Into<String>,
        manager: PublicKey,
        backups: Vec<PublicKey>,
        anchor_period: u64,
        policy: TxPolicy,
    ) -> Result<Self, LedgerError> {
        if backups.is_empty() {
            return Err(LedgerError::InvalidConfig("child chain needs at least one backup manager"));
        }
        if anchor_period == 0 {
            return Err(LedgerError::InvalidConfig("anchor period must be positive"));
        }
        Ok(Self::with_governance(
            chain_id.into(),
            Governance::Child {
                manager,
                backups,
                anchor_period,
                terms: alloc::vec![ManagerTerm {
                    from_height: 0,
                    manager,
                }],
            },
            policy,
        ))
    }

    fn with_governance(chain_id: String, governance: Governance, policy: TxPolicy) -> Self {
        Chain {
            chain_id,
            governance,
            policy,
            blocks: Vec::new(),
            signer_index: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.chain_id
    }

    pub fn kind(&self) -> ChainKind {
        match self.governance {
            Governance::Public { .. } => ChainKind::Public,
            Governance::Child { .. } => ChainKind::Child,
        }
    }

    pub fn policy(&self) -> &TxPolicy {
        &self.policy
    }

    /// Current manager; `None` for the public chain.
    pub fn manager_pk(&self) -> Option<PublicKey> {
        match &self.governance {
            Governance::Child { manager, .. } => Some(*manager),
            Governance::Public { .. } => None,
        }
    }

    pub fn backup_manager_pks(&self) -> &[PublicKey] {
        match &self.governance {
            Governance::Child { backups, .. } => backups,
            Governance::Public { .. } => &[],
        }
    }

    pub fn anchor_period(&self) -> Option<u64> {
        match &self.governance {
            Governance::Child { anchor_period, .. } => Some(*anchor_period),
            Governance::Public { .. } => None,
        }
    }

    pub fn manager_terms(&self) -> &[ManagerTerm] {
        match &self.governance {
            Governance::Child { terms, .. } => terms,
            Governance::Public { .. } => &[],
        }
    }

    pub fn producers(&self) -> &[PublicKey] {
        match &self.governance {
            Governance::Public { producers } => producers,
            Governance::Child { .. } => &[],
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Mutable access for fault injection in tests and attack tooling.
    /// Bypasses every check; the result may no longer validate.
    pub fn blocks_mut_unchecked(&mut self) -> &mut Vec<Block> {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn tx_count(&self) -> usize {
        self.blocks.iter().map(|b| b.txs.len()).sum()
    }

    /// All transactions in chain order with their block height.
    pub fn transactions(&self) -> impl Iterator<Item = (u64, &TxEnvelope)> + '_ {
        self.blocks
            .iter()
            .flat_map(|b| b.txs.iter().map(move |tx| (b.height, tx)))
    }

    /// Who may produce the block at `height` with timestamp `tick`.
    pub fn expected_producer(&self, height: u64, tick: u64) -> PublicKey {
        match &self.governance {
            Governance::Public { producers } => producers[(tick % producers.len() as u64) as usize],
            Governance::Child { terms, .. } => {
                terms
                    .iter()
                    .rev()
                    .find(|t| t.from_height <= height)
                    .unwrap_or(&terms[0])
                    .manager
            }
        }
    }

    /// Validates `txs` in order against the chain (earlier txs of the same
    /// block count as history for later ones), then seals a block.
    pub fn append_block(
        &mut self,
        txs: Vec<TxEnvelope>,
        producer: &KeyPair,
        tick: u64,
    ) -> Result<&Block, LedgerError> {
        let height = self.blocks.len() as u64;
        if let Some(tip) = self.tip() {
            if tick <= tip.timestamp {
                return Err(LedgerError::NonMonotonicTick { tick });
            }
        }
        if producer.pk() != self.expected_producer(height, tick) {
            return Err(LedgerError::InvalidProducer);
        }
        for (index, tx) in txs.iter().enumerate() {
            let view = Overlay::new(self, &txs[..index]);
            check_tx(&view, tx, &self.policy).map_err(|reason| LedgerError::InvalidTx { index, reason })?;
        }
        let prev_hash = self.tip().map(|b| b.block_hash).unwrap_or(Hash::ZERO);
        let mut block = Block {
            height,
            prev_hash,
            timestamp: tick,
            txs,
            producer: producer.pk(),
            block_hash: Hash::ZERO,
            producer_sig: Signature([0u8; 64]),
        };
        block.block_hash = block.compute_hash();
        block.producer_sig = producer.sign(block.block_hash.as_bytes());
        let bi = self.blocks.len();
        for (ti, tx) in block.txs.iter().enumerate() {
            self.signer_index.insert(tx.signer_pk, (bi, ti));
        }
        self.blocks.push(block);
        Ok(&self.blocks[bi])
    }

    /// Promotes the first backup manager. The demoted manager can no longer
    /// produce blocks.
    pub fn failover(&mut self) -> Result<PublicKey, LedgerError> {
        let next_height = self.blocks.len() as u64;
        match &mut self.governance {
            Governance::Public { .. } => Err(LedgerError::NotChildChain),
            Governance::Child {
                manager,
                backups,
                terms,
                ..
            } => {
                if backups.is_empty() {
                    return Err(LedgerError::NoBackupAvailable);
                }
                *manager = backups.remove(0);
                match terms.last_mut() {
                    Some(t) if t.from_height == next_height => t.manager = *manager,
                    _ => terms.push(ManagerTerm {
                        from_height: next_height,
                        manager: *manager,
                    }),
                }
                Ok(*manager)
            }
        }
    }

    /// Every manager that has ever held the chain.
    pub fn all_managers(&self) -> impl Iterator<Item = &PublicKey> + '_ {
        self.manager_terms().iter().map(|t| &t.manager)
    }

    /// Structural check: heights, hash links, block hashes, producer
    /// signatures and producer schedule. Does not re-validate transactions.
    pub fn verify_structure(&self) -> Result<(), ChainFault> {
        let mut prev = Hash::ZERO;
        let mut last_tick: Option<u64> = None;
        for (i, b) in self.blocks.iter().enumerate() {
            let h = i as u64;
            if b.height != h {
                return Err(ChainFault::new(h, FaultKind::Height));
            }
            if b.prev_hash != prev {
                return Err(ChainFault::new(h, FaultKind::PrevHash));
            }
            if b.compute_hash() != b.block_hash {
                return Err(ChainFault::new(h, FaultKind::BlockHash));
            }
            if !b.signature_valid() {
                return Err(ChainFault::new(h, FaultKind::ProducerSignature));
            }
            if b.producer != self.expected_producer(h, b.timestamp) {
                return Err(ChainFault::new(h, FaultKind::Producer));
            }
            if last_tick.is_some_and(|t| b.timestamp <= t) {
                return Err(ChainFault::new(h, FaultKind::Timestamp));
            }
            last_tick = Some(b.timestamp);
            prev = b.block_hash;
        }
        Ok(())
    }

    fn rebuild_index(&mut self) {
        self.signer_index.clear();
        for (bi, b) in self.blocks.iter().enumerate() {
            for (ti, tx) in b.txs.iter().enumerate() {
                self.signer_index.insert(tx.signer_pk, (bi, ti));
            }
        }
    }

    /// Concatenated canonical block encodings. Appending a block only ever
    /// extends this byte string.
    pub fn block_log_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        for b in &self.blocks {
            w.put(b);
        }
        w.finish()
    }

    /// Single-file dump: version byte, canonical chain, SHA-256 of both.
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(DUMP_FORMAT_VERSION).put(self);
        let digest = Hash::digest(w.as_slice());
        w.raw(digest.as_bytes());
        w.finish()
    }

    pub fn from_dump_bytes(bytes: &[u8]) -> Result<Self, LedgerError> {
        if bytes.len() < 33 {
            return Err(DecodeError::UnexpectedEof.into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Hash::digest(body).as_bytes()[..] != digest[..] {
            return Err(LedgerError::ChecksumMismatch);
        }
        let mut r = Reader::new(body);
        let version = r.u8()?;
        if version != DUMP_FORMAT_VERSION {
            return Err(DecodeError::InvalidTag {
                what: "dump version",
                tag: version,
            }
            .into());
        }
        let chain = Chain::decode(&mut r)?;
        r.finish()?;
        Ok(chain)
    }
}

impl ChainView for Chain {
    fn latest_tx_by_pk(&self, pk: &PublicKey) -> Option<&TxEnvelope> {
        let &(bi, ti) = self.signer_index.get(pk)?;
        Some(&self.blocks[bi].txs[ti])
    }
}

impl Encode for Chain {
    fn encode(&self, w: &mut Writer) {
        w.str(&self.chain_id).u8(self.kind() as u8);
        match &self.governance {
            Governance::Public { producers } => {
                w.list(producers);
            }
            Governance::Child {
                manager,
                backups,
                anchor_period,
                terms,
            } => {
                w.put(manager).list(backups).u64(*anchor_period);
                w.len(terms.len());
                for t in terms {
                    w.u64(t.from_height).put(&t.manager);
                }
            }
        }
        w.put(&self.policy).list(&self.blocks);
    }
}

impl Decode for Chain {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let chain_id = r.string()?;
        let governance = match r.u8()? {
            0 => Governance::Public {
                producers: r.list()?,
            },
            1 => {
                let manager = r.get()?;
                let backups = r.list()?;
                let anchor_period = r.u64()?;
                let n = r.len(8)?;
                let mut terms = Vec::with_capacity(n);
                for _ in 0..n {
                    terms.push(ManagerTerm {
                        from_height: r.u64()?,
                        manager: r.get()?,
                    });
                }
                if terms.is_empty() {
                    return Err(DecodeError::Invalid("child chain without manager terms"));
                }
                Governance::Child {
                    manager,
                    backups,
                    anchor_period,
                    terms,
                }
            }
            tag => return Err(DecodeError::InvalidTag { what: "chain kind", tag }),
        };
        let policy = r.get()?;
        let blocks = r.list()?;
        let mut chain = Chain::with_governance(chain_id, governance, policy);
        chain.blocks = blocks;
        chain.rebuild_index();
        Ok(chain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FaultKind {
    Height,
    PrevHash,
    BlockHash,
    ProducerSignature,
    Producer,
    Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("block {height}: {kind:?}")]
pub struct ChainFault {
    pub height: u64,
    pub kind: FaultKind,
}

impl ChainFault {
    fn new(height: u64, kind: FaultKind) -> Self {
        Self { height, kind }
    }
}

/// True iff heights are consecutive and every hash link, block hash and
/// producer signature recomputes.
pub fn validate_chain(chain: &Chain) -> bool {
    chain.verify_structure().is_ok()
}

pub fn latest_tx_by_pk<'a>(chain: &'a Chain, pk: &PublicKey) -> Option<&'a TxEnvelope> {
    chain.latest_tx_by_pk(pk)
}

/// Builds the anchor transaction for the current child tip, signed by the
/// child's manager.
pub fn anchor_tx(
    child: &Chain,
    manager: &KeyPair,
    tick: u64,
) -> Result<(ChainAnchor, TxEnvelope), LedgerError> {
    let period = child.anchor_period().ok_or(LedgerError::NotChildChain)?;
    if tick % period != 0 {
        return Err(LedgerError::NotAnchorTick { tick, period });
    }
    let tip = child.tip().ok_or(LedgerError::EmptyChild)?;
    if child.manager_pk() != Some(manager.pk()) {
        return Err(LedgerError::NotManager);
    }
    let anchor = ChainAnchor {
        child_chain_id: child.id().into(),
        anchored_height: tip.height,
        anchored_hash: tip.block_hash,
        tick,
    };
    let tx = build_tx(TxBody::Anchor(anchor.clone()), manager)
        .map_err(|_| LedgerError::InvalidConfig("anchor body rejected"))?;
    Ok((anchor, tx))
}

/// Anchors the child tip into a new public block produced at `tick`.
pub fn anchor_child(
    public: &mut Chain,
    child: &Chain,
    manager: &KeyPair,
    producer: &KeyPair,
    tick: u64,
) -> Result<ChainAnchor, LedgerError> {
    if public.kind() != ChainKind::Public {
        return Err(LedgerError::InvalidConfig("anchors go on the public chain"));
    }
    let (anchor, tx) = anchor_tx(child, manager, tick)?;
    public.append_block(alloc::vec![tx], producer, tick)?;
    Ok(anchor)
}

/// Recomputes the child block hash at the anchored height.
pub fn verify_anchor(anchor: &ChainAnchor, child: &Chain) -> bool {
    anchor.child_chain_id == child.id()
        && child
            .blocks()
            .get(anchor.anchored_height as usize)
            .is_some_and(|b| b.compute_hash() == anchor.anchored_hash && b.block_hash == anchor.anchored_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::generate_keypair;
    use crate::txvocab::{EpsBody, EsdpBody};
    use alloc::vec;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        keys: Vec<KeyPair>,
    }

    impl Fixture {
        fn new() -> Self {
            let mut rng = ChaCha20Rng::seed_from_u64(7);
            Fixture {
                keys: (0..6).map(|_| generate_keypair(&mut rng)).collect(),
            }
        }

        fn public(&self) -> Chain {
            Chain::public("public", vec![self.keys[0].pk()], TxPolicy::default()).unwrap()
        }

        fn child(&self) -> Chain {
            Chain::child(
                "vpp",
                self.keys[1].pk(),
                vec![self.keys[2].pk(), self.keys[3].pk()],
                10,
                TxPolicy::default(),
            )
            .unwrap()
        }

        fn esdp(&self, signer: usize, ts: u64) -> TxEnvelope {
            build_tx(
                TxBody::Esdp(EsdpBody {
                    region_id: "R".into(),
                    predicted_supply: 1.0 + ts as f64,
                    predicted_demand: 2.0,
                    horizon: 1,
                    timestamp: ts,
                    p_t_id: None,
                }),
                &self.keys[signer],
            )
            .unwrap()
        }
    }

    #[test]
    fn genesis_has_zero_prev_hash() {
        let f = Fixture::new();
        let mut c = f.public();
        let b = c.append_block(vec![], &f.keys[0], 0).unwrap();
        assert_eq!(b.height, 0);
        assert_eq!(b.prev_hash, Hash::ZERO);
        assert!(validate_chain(&c));
    }

    #[test]
    fn block_links_to_previous() {
        let f = Fixture::new();
        let mut c = f.public();
        for t in 0..4 {
            c.append_block(vec![f.esdp(4, t)], &f.keys[0], t).unwrap();
        }
        let tip3 = c.blocks()[3].block_hash;
        let b = c.append_block(vec![f.esdp(4, 10), f.esdp(5, 10)], &f.keys[0], 10).unwrap();
        assert_eq!(b.height, 4);
        assert_eq!(b.prev_hash, tip3);
    }

    #[test]
    fn invalid_signature_rejects_whole_block() {
        let f = Fixture::new();
        let mut c = f.public();
        c.append_block(vec![f.esdp(4, 0)], &f.keys[0], 0).unwrap();
        let before = c.clone();
        let mut bad = f.esdp(4, 1);
        bad.signature.0[3] ^= 0x01;
        let err = c.append_block(vec![f.esdp(5, 1), bad], &f.keys[0], 1).unwrap_err();
        assert_eq!(
            err,
            LedgerError::InvalidTx {
                index: 1,
                reason: TxRejection::BadSignature
            }
        );
        assert_eq!(c, before);
    }

    #[test]
    fn wrong_round_producer_rejected() {
        let f = Fixture::new();
        let mut c = Chain::public("p", vec![f.keys[0].pk(), f.keys[1].pk()], TxPolicy::default()).unwrap();
        assert_eq!(c.append_block(vec![], &f.keys[1], 0).unwrap_err(), LedgerError::InvalidProducer);
        c.append_block(vec![], &f.keys[0], 0).unwrap();
        c.append_block(vec![], &f.keys[1], 1).unwrap();
        assert!(validate_chain(&c));
    }

    #[test]
    fn ticks_must_advance() {
        let f = Fixture::new();
        let mut c = f.public();
        c.append_block(vec![], &f.keys[0], 5).unwrap();
        assert_eq!(
            c.append_block(vec![], &f.keys[0], 5).unwrap_err(),
            LedgerError::NonMonotonicTick { tick: 5 }
        );
    }

    fn ten_block_chain(f: &Fixture) -> Chain {
        let mut c = f.public();
        for t in 0..10 {
            c.append_block(vec![f.esdp(4, t), f.esdp(5, t)], &f.keys[0], t).unwrap();
        }
        c
    }

    #[test]
    fn fresh_chain_validates() {
        let f = Fixture::new();
        assert!(validate_chain(&ten_block_chain(&f)));
    }

    #[test]
    fn mutated_tx_detected() {
        let f = Fixture::new();
        let mut c = ten_block_chain(&f);
        if let TxBody::Esdp(b) = &mut c.blocks_mut_unchecked()[4].txs[1].body {
            b.predicted_demand = 2.5;
        }
        assert!(!validate_chain(&c));
        assert_eq!(c.verify_structure().unwrap_err().kind, FaultKind::BlockHash);
    }

    #[test]
    fn reordered_blocks_detected() {
        let f = Fixture::new();
        let mut c = ten_block_chain(&f);
        c.blocks_mut_unchecked().swap(3, 6);
        assert!(!validate_chain(&c));
    }

    #[test]
    fn anchor_round_trip() {
        let f = Fixture::new();
        let mut public = f.public();
        let mut child = f.child();
        for t in 1..=10 {
            child.append_block(vec![f.esdp(4, t)], &f.keys[1], t).unwrap();
        }
        let tip = child.tip().unwrap().block_hash;
        let anchor = anchor_child(&mut public, &child, &f.keys[1], &f.keys[0], 10).unwrap();
        assert_eq!(anchor.anchored_hash, tip);
        let on_chain = &public.tip().unwrap().txs[0];
        assert_eq!(on_chain.body, TxBody::Anchor(anchor.clone()));
        // recompute the child tip from its bytes
        let restored = Chain::from_dump_bytes(&child.to_dump_bytes()).unwrap();
        assert_eq!(restored.blocks()[anchor.anchored_height as usize].compute_hash(), anchor.anchored_hash);
        assert!(verify_anchor(&anchor, &restored));
    }

    #[test]
    fn anchor_off_period_rejected() {
        let f = Fixture::new();
        let mut child = f.child();
        child.append_block(vec![f.esdp(4, 1)], &f.keys[1], 1).unwrap();
        assert_eq!(
            anchor_tx(&child, &f.keys[1], 7).unwrap_err(),
            LedgerError::NotAnchorTick { tick: 7, period: 10 }
        );
    }

    #[test]
    fn anchor_empty_child_rejected() {
        let f = Fixture::new();
        assert_eq!(anchor_tx(&f.child(), &f.keys[1], 10).unwrap_err(), LedgerError::EmptyChild);
    }

    #[test]
    fn failover_rotates_backups() {
        let f = Fixture::new();
        let mut c = f.child();
        c.append_block(vec![], &f.keys[1], 0).unwrap();
        assert_eq!(c.failover().unwrap(), f.keys[2].pk());
        assert_eq!(c.manager_pk(), Some(f.keys[2].pk()));
        assert_eq!(c.backup_manager_pks(), &[f.keys[3].pk()]);
        assert_eq!(c.append_block(vec![], &f.keys[1], 1).unwrap_err(), LedgerError::InvalidProducer);
        c.append_block(vec![], &f.keys[2], 1).unwrap();
        assert!(validate_chain(&c));
        c.failover().unwrap();
        assert_eq!(c.failover().unwrap_err(), LedgerError::NoBackupAvailable);
    }

    #[test]
    fn block_by_demoted_manager_fails_validation() {
        let f = Fixture::new();
        let mut c = f.child();
        c.append_block(vec![], &f.keys[1], 0).unwrap();
        c.failover().unwrap();
        c.append_block(vec![], &f.keys[2], 1).unwrap();
        // forge a block from the old manager with valid hash and signature
        let prev = c.tip().unwrap().block_hash;
        let mut b = Block {
            height: 2,
            prev_hash: prev,
            timestamp: 2,
            txs: vec![],
            producer: f.keys[1].pk(),
            block_hash: Hash::ZERO,
            producer_sig: Signature([0; 64]),
        };
        b.block_hash = b.compute_hash();
        b.producer_sig = f.keys[1].sign(b.block_hash.as_bytes());
        c.blocks_mut_unchecked().push(b);
        assert_eq!(c.verify_structure().unwrap_err().kind, FaultKind::Producer);
    }

    #[test]
    fn child_requires_backup() {
        let f = Fixture::new();
        assert!(Chain::child("c", f.keys[1].pk(), vec![], 10, TxPolicy::default()).is_err());
    }

    #[test]
    fn latest_tx_matches_linear_scan() {
        let f = Fixture::new();
        let mut c = f.public();
        let mut all = Vec::new();
        for t in 0..8 {
            let txs = if t == 1 || t == 4 || t == 7 {
                vec![f.esdp(4, t), f.esdp(5, t)]
            } else {
                vec![f.esdp(5, t)]
            };
            all.extend(txs.clone());
            c.append_block(txs, &f.keys[0], t).unwrap();
        }
        assert!(latest_tx_by_pk(&c, &f.keys[3].pk()).is_none());
        let got = latest_tx_by_pk(&c, &f.keys[4].pk()).unwrap();
        assert_eq!(got, all.as_slice().latest_tx_by_pk(&f.keys[4].pk()).unwrap());
        assert_eq!(c.blocks()[7].txs[0].t_id, got.t_id);
    }

    #[test]
    fn same_block_later_index_wins() {
        let f = Fixture::new();
        let mut c = f.public();
        let a = f.esdp(4, 1);
        let b = f.esdp(4, 2);
        c.append_block(vec![a, b.clone()], &f.keys[0], 0).unwrap();
        assert_eq!(c.latest_tx_by_pk(&f.keys[4].pk()).unwrap().t_id, b.t_id);
    }

    #[test]
    fn eps_chain_within_one_block() {
        let f = Fixture::new();
        let mut c = f.public();
        let eps = |p, price| {
            build_tx(
                TxBody::Eps(EpsBody {
                    p_t_id: p,
                    region_id: "R".into(),
                    energy_price: price,
                    issued_at: 0,
                    expiry: 5,
                }),
                &f.keys[4],
            )
            .unwrap()
        };
        let first = eps(Hash::ZERO, 0.3);
        let second = eps(first.t_id, 0.4);
        c.append_block(vec![first, second], &f.keys[0], 0).unwrap();
        let third_bad = eps(Hash::ZERO, 0.5);
        assert!(matches!(
            c.append_block(vec![third_bad], &f.keys[0], 1),
            Err(LedgerError::InvalidTx {
                reason: TxRejection::PrevTxMismatch,
                ..
            })
        ));
    }

    #[test]
    fn dump_round_trip_and_prefix() {
        let f = Fixture::new();
        let mut c = f.child();
        c.append_block(vec![f.esdp(4, 0)], &f.keys[1], 0).unwrap();
        let before = c.to_canonical_bytes();
        let log_before = c.block_log_bytes();
        c.failover().unwrap();
        c.append_block(vec![f.esdp(4, 1)], &f.keys[2], 1).unwrap();
        let restored = Chain::from_dump_bytes(&c.to_dump_bytes()).unwrap();
        assert_eq!(restored, c);
        assert!(validate_chain(&restored));
        // block bytes of the old prefix survive the append unchanged
        let old_blocks = Chain::from_canonical_bytes(&before).unwrap();
        assert_eq!(old_blocks.blocks()[0].to_canonical_bytes(), c.blocks()[0].to_canonical_bytes());
        assert!(c.block_log_bytes().starts_with(&log_before));
    }

    #[test]
    fn dump_checksum_detects_flip() {
        let f = Fixture::new();
        let mut c = f.public();
        c.append_block(vec![f.esdp(4, 0)], &f.keys[0], 0).unwrap();
        let mut bytes = c.to_dump_bytes();
        assert_eq!(bytes[0], DUMP_FORMAT_VERSION);
        bytes[40] ^= 0x80;
        assert_eq!(Chain::from_dump_bytes(&bytes).unwrap_err(), LedgerError::ChecksumMismatch);
    }
}
