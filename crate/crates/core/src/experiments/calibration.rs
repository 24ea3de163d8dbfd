//! Default hardware and model calibration.
//!
//! The hardware entries are calibration inputs named after common edge and
//! datacenter parts. Rates and power figures are plausible round numbers,
//! not measurements.

use serde::{Deserialize, Serialize};

use crate::models::QuantBits;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: &'static str,
    pub price_usd: f64,
    pub watts_avg: f64,
    /// Standalone draft-model rate at 16, 8 and 4 bits.
    pub tokens_per_second: [f64; 3],
}

impl HardwareProfile {
    pub fn rate(&self, quant: QuantBits) -> f64 {
        match quant {
            QuantBits::Q16 => self.tokens_per_second[0],
            QuantBits::Q8 => self.tokens_per_second[1],
            QuantBits::Q4 => self.tokens_per_second[2],
        }
    }
}

pub const RPI4B: HardwareProfile = HardwareProfile {
    name: "rpi4b",
    price_usd: 55.0,
    watts_avg: 6.4,
    tokens_per_second: [2.1, 3.8, 6.3],
};

pub const RPI5: HardwareProfile = HardwareProfile {
    name: "rpi5",
    price_usd: 80.0,
    watts_avg: 8.0,
    tokens_per_second: [5.24, 9.4, 15.7],
};

pub const JETSON_ORIN_NANO: HardwareProfile = HardwareProfile {
    name: "jetson-orin-nano",
    price_usd: 499.0,
    watts_avg: 15.0,
    tokens_per_second: [16.0, 28.8, 48.0],
};

/// Hosts the target model. Its rate is the unbatched decode rate implied
/// by the default service-time model.
pub const A100_SERVER: HardwareProfile = HardwareProfile {
    name: "a100-server",
    price_usd: 15_000.0,
    watts_avg: 400.0,
    tokens_per_second: [46.0, 46.0, 46.0],
};

pub const PROFILES: [HardwareProfile; 4] = [RPI4B, RPI5, JETSON_ORIN_NANO, A100_SERVER];

pub fn hardware(name: &str) -> Option<HardwareProfile> {
    PROFILES.iter().copied().find(|p| p.name == name)
}

/// Draft-model noise relative to the target, per quantization level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DraftNoise {
    pub q16: f64,
    pub q8: f64,
    pub q4: f64,
}

impl Default for DraftNoise {
    fn default() -> Self {
        Self {
            q16: 0.2,
            q8: 0.25,
            q4: 0.3,
        }
    }
}

impl DraftNoise {
    pub fn get(&self, quant: QuantBits) -> f64 {
        match quant {
            QuantBits::Q16 => self.q16,
            QuantBits::Q8 => self.q8,
            QuantBits::Q4 => self.q4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup() {
        assert_eq!(hardware("rpi5").unwrap().rate(QuantBits::Q16), 5.24);
        assert_eq!(hardware("rpi5").unwrap().price_usd, 80.0);
        assert!(hardware("pdp11").is_none());
        for p in PROFILES {
            assert!(p.rate(QuantBits::Q4) >= p.rate(QuantBits::Q16));
        }
    }
}
