use serde::{Deserialize, Serialize};

/// Point-to-point link used to estimate model exchange time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub bandwidth_bps: f64,
    pub latency_s: f64,
    /// Wire precision: 2 for half precision, 4 for `f32`.
    pub bytes_per_param: u32,
}

impl NetworkModel {
    pub fn from_mbps(mbps: f64, latency_s: f64, bytes_per_param: u32) -> Self {
        Self { bandwidth_bps: mbps * 1e6, latency_s, bytes_per_param }
    }

    pub fn payload_bits(&self, n_params: u64) -> f64 {
        n_params as f64 * self.bytes_per_param as f64 * 8.0
    }
}

/// Seconds to ship `n_params` parameters: serialization time plus latency.
pub fn transfer_time(n_params: u64, net: &NetworkModel) -> f64 {
    assert!(net.bandwidth_bps > 0.0, "bandwidth must be positive");
    net.payload_bits(n_params) / net.bandwidth_bps + net.latency_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_precision_billion_scale_upload() {
        let net = NetworkModel::from_mbps(100.0, 0.0, 2);
        assert_eq!(net.payload_bits(1_300_000_000), 20.8e9);
        assert!((transfer_time(1_300_000_000, &net) - 208.0).abs() < 1e-9);
    }

    #[test]
    fn doubling_bandwidth_halves_time() {
        let slow = NetworkModel::from_mbps(50.0, 0.0, 4);
        let fast = NetworkModel::from_mbps(100.0, 0.0, 4);
        assert!((transfer_time(12345, &slow) - 2.0 * transfer_time(12345, &fast)).abs() < 1e-12);
    }

    #[test]
    fn latency_floor() {
        let net = NetworkModel { bandwidth_bps: 1e15, latency_s: 0.25, bytes_per_param: 4 };
        assert!((transfer_time(1, &net) - 0.25).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn monotone_in_bandwidth_and_size(
            n in 1u64..1_000_000_000,
            extra in 1u64..1_000_000,
            bw in 1e3f64..1e11,
            factor in 1.01f64..100.0,
            lat in 0f64..10.0,
        ) {
            let net = NetworkModel { bandwidth_bps: bw, latency_s: lat, bytes_per_param: 2 };
            let faster = NetworkModel { bandwidth_bps: bw * factor, ..net.clone() };
            prop_assert!(transfer_time(n, &faster) < transfer_time(n, &net));
            prop_assert!(transfer_time(n + extra, &net) >= transfer_time(n, &net));
        }
    }
}
