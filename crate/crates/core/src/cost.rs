//! Operation counters threaded through every forward computation.
//!
//! Two quantities are tracked: transcendental ("exp-class") evaluations and
//! multiply-adds performed by matrix products. The counter is an explicit
//! handle owned by the caller; nothing here is global.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Grouping of the three-matrix attention product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProductOrder {
    /// `(Q K^T) V`, quadratic in the token count.
    TokensFirst,
    /// `Q (K^T V)`, quadratic in the channel count.
    ChannelsFirst,
}

impl ProductOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            ProductOrder::TokensFirst => "TokensFirst",
            ProductOrder::ChannelsFirst => "ChannelsFirst",
        }
    }
}

impl fmt::Display for ProductOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which ordering a forward pass actually used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OrderingUsed {
    #[default]
    NotApplicable,
    Fixed(ProductOrder),
}

impl fmt::Display for OrderingUsed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderingUsed::NotApplicable => f.write_str("NotApplicable"),
            OrderingUsed::Fixed(o) => o.fmt(f),
        }
    }
}

/// Mutable counter handle. Counters only ever increase.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Cost {
    exp_ops: u64,
    mul_adds: u64,
    ordering_used: OrderingUsed,
}

impl Cost {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_exp(&mut self, n: u64) {
        self.exp_ops += n;
    }

    pub fn add_mul_adds(&mut self, n: u64) {
        self.mul_adds += n;
    }

    pub fn record_ordering(&mut self, order: ProductOrder) {
        self.ordering_used = OrderingUsed::Fixed(order);
    }

    pub fn exp_ops(&self) -> u64 {
        self.exp_ops
    }

    pub fn mul_adds(&self) -> u64 {
        self.mul_adds
    }

    pub fn report(&self) -> CostReport {
        CostReport {
            exp_ops: self.exp_ops,
            mul_adds: self.mul_adds,
            ordering_used: self.ordering_used,
        }
    }
}

/// Snapshot of a [`Cost`] after a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub exp_ops: u64,
    pub mul_adds: u64,
    pub ordering_used: OrderingUsed,
}

impl CostReport {
    /// Counts accumulated since `earlier` was taken from the same handle.
    pub fn since(&self, earlier: &CostReport) -> CostReport {
        CostReport {
            exp_ops: self.exp_ops - earlier.exp_ops,
            mul_adds: self.mul_adds - earlier.mul_adds,
            ordering_used: self.ordering_used,
        }
    }
}
