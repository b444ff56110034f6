//! Categorised FLOP counters.

use core::ops::{Add, Sub};

/// Bucket a matrix product is booked under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlopCategory {
    /// Base key and value projections.
    KvProjection,
    /// Low-rank adapter products, on whichever projections carry adapters.
    Lora,
    /// Everything else: query/output projections, attention scores, MLP, head.
    Other,
}

/// Why a token row is being pushed through the key/value projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RowRole {
    /// First encoding of a context token.
    Fresh,
    /// Re-encoding of a token generated since the last retrieval.
    StrideReencode,
    /// Re-encoding of a token that precedes the last retrieval point.
    PrefixReencode,
    /// Retrieved evidence, marking tokens included.
    Evidence,
}

impl RowRole {
    pub const ALL: [RowRole; 4] =
        [RowRole::Fresh, RowRole::StrideReencode, RowRole::PrefixReencode, RowRole::Evidence];

    #[inline]
    fn index(self) -> usize {
        match self {
            RowRole::Fresh => 0,
            RowRole::StrideReencode => 1,
            RowRole::PrefixReencode => 2,
            RowRole::Evidence => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RowRole::Fresh => "fresh",
            RowRole::StrideReencode => "stride_reencode",
            RowRole::PrefixReencode => "prefix_reencode",
            RowRole::Evidence => "evidence",
        }
    }

    pub fn is_reencode(self) -> bool {
        matches!(self, RowRole::StrideReencode | RowRole::PrefixReencode)
    }
}

/// FLOPs split by [`RowRole`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoleFlops([u64; 4]);

impl RoleFlops {
    #[inline]
    pub fn get(&self, role: RowRole) -> u64 {
        self.0[role.index()]
    }

    pub fn sum(&self) -> u64 {
        self.0.iter().sum()
    }

    /// Sum over the roles that are not evidence.
    pub fn context(&self) -> u64 {
        self.sum() - self.get(RowRole::Evidence)
    }

    fn add(&mut self, role: RowRole, flops: u64) {
        self.0[role.index()] += flops;
    }
}

/// Running FLOP totals for one session.
///
/// Counters only grow. Key/value and adapter FLOPs are additionally split by
/// the role of the rows that produced them, so a run can tell first
/// encodings apart from recomputation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopsLedger {
    kv_projection: u64,
    lora: u64,
    other: u64,
    kv_by_role: RoleFlops,
    lora_by_role: RoleFlops,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn book(&mut self, category: FlopCategory, flops: u64) {
        match category {
            FlopCategory::KvProjection => self.kv_projection += flops,
            FlopCategory::Lora => self.lora += flops,
            FlopCategory::Other => self.other += flops,
        }
    }

    /// Records that `flops` already booked under `category` came from rows
    /// of the given role. Only key/value and adapter FLOPs are attributed.
    pub fn attribute(&mut self, category: FlopCategory, role: RowRole, flops: u64) {
        match category {
            FlopCategory::KvProjection => self.kv_by_role.add(role, flops),
            FlopCategory::Lora => self.lora_by_role.add(role, flops),
            FlopCategory::Other => {}
        }
    }

    pub fn kv_projection(&self) -> u64 {
        self.kv_projection
    }
    pub fn lora(&self) -> u64 {
        self.lora
    }
    pub fn other(&self) -> u64 {
        self.other
    }
    pub fn total(&self) -> u64 {
        self.kv_projection + self.lora + self.other
    }
    pub fn get(&self, category: FlopCategory) -> u64 {
        match category {
            FlopCategory::KvProjection => self.kv_projection,
            FlopCategory::Lora => self.lora,
            FlopCategory::Other => self.other,
        }
    }
    pub fn kv_by_role(&self) -> RoleFlops {
        self.kv_by_role
    }
    pub fn lora_by_role(&self) -> RoleFlops {
        self.lora_by_role
    }
}

impl Add for FlopsLedger {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self.kv_projection += rhs.kv_projection;
        self.lora += rhs.lora;
        self.other += rhs.other;
        for i in 0..4 {
            self.kv_by_role.0[i] += rhs.kv_by_role.0[i];
            self.lora_by_role.0[i] += rhs.lora_by_role.0[i];
        }
        self
    }
}

/// Difference between two snapshots of the same ledger (`later - earlier`).
impl Sub for FlopsLedger {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self.kv_projection -= rhs.kv_projection;
        self.lora -= rhs.lora;
        self.other -= rhs.other;
        for i in 0..4 {
            self.kv_by_role.0[i] -= rhs.kv_by_role.0[i];
            self.lora_by_role.0[i] -= rhs.lora_by_role.0[i];
        }
        self
    }
}

impl core::iter::Sum for FlopsLedger {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_is_sum_of_categories() {
        let mut l = FlopsLedger::new();
        l.book(FlopCategory::KvProjection, 10);
        l.book(FlopCategory::Lora, 3);
        l.book(FlopCategory::Other, 7);
        l.attribute(FlopCategory::KvProjection, RowRole::Evidence, 4);
        l.attribute(FlopCategory::KvProjection, RowRole::Fresh, 6);
        l.attribute(FlopCategory::Other, RowRole::Fresh, 7);
        assert_eq!(l.total(), 20);
        assert_eq!(l.kv_by_role().sum(), 10);
        assert_eq!(l.kv_by_role().context(), 6);
        assert_eq!(l.lora_by_role().sum(), 0);
    }

    #[test]
    fn snapshot_difference() {
        let mut l = FlopsLedger::new();
        l.book(FlopCategory::Lora, 5);
        let before = l;
        l.book(FlopCategory::Lora, 2);
        l.attribute(FlopCategory::Lora, RowRole::StrideReencode, 2);
        let d = l - before;
        assert_eq!(d.lora(), 2);
        assert_eq!(d.lora_by_role().get(RowRole::StrideReencode), 2);
        assert_eq!(before + d, l);
    }
}
