//! Integer simulation time.
//!
//! All timing is carried in whole microseconds; nothing in the MAC needs
//! finer resolution (the PHY symbol is 16 µs and clock offsets are a few
//! µs). Keeping time integral makes slot accounting exact and traces
//! reproducible bit for bit.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

/// Duration of one PHY symbol in microseconds (2.4 GHz O-QPSK).
pub const SYMBOL_US: u64 = 16;

/// Symbols in one slot of the base (order 0) superframe.
pub const BASE_SLOT_SYMBOLS: u64 = 60;

/// Symbols in the base superframe: 16 slots of 60 symbols, i.e. 15.36 ms.
pub const BASE_SUPERFRAME_SYMBOLS: u64 = 960;

/// An instant or duration on the simulation clock, in microseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_us(us: u64) -> Self {
        SimTime(us)
    }

    /// Duration of `n` symbols at the default 16 µs symbol.
    pub const fn from_symbols(n: u64) -> Self {
        SimTime(n * SYMBOL_US)
    }

    pub const fn as_us(self) -> u64 {
        self.0
    }

    pub const fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    /// Signed offset applied to an instant; clamps at zero.
    pub fn offset_us(self, off: i64) -> SimTime {
        if off >= 0 {
            SimTime(self.0 + off as u64)
        } else {
            SimTime(self.0.saturating_sub(off.unsigned_abs()))
        }
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl Mul<u64> for SimTime {
    type Output = SimTime;
    fn mul(self, rhs: u64) -> SimTime {
        SimTime(self.0 * rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_constants() {
        assert_eq!(SimTime::from_symbols(BASE_SUPERFRAME_SYMBOLS).as_us(), 15_360);
        assert_eq!(SimTime::from_symbols(BASE_SLOT_SYMBOLS).as_us(), 960);
    }

    #[test]
    fn offsets_clamp_at_zero() {
        assert_eq!(SimTime(100).offset_us(-30).as_us(), 70);
        assert_eq!(SimTime(10).offset_us(-30).as_us(), 0);
        assert_eq!(SimTime(10).offset_us(5).as_us(), 15);
    }
}
