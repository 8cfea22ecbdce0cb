//! Small hand-checkable scenarios used by tests, the CLI and documentation.

use std::sync::Arc;

use serde_json::json;

use crate::hst::hst_from_shape;
use crate::protocol::RequestId;
use crate::rational::{frac, int, Rational};
use crate::sim::{LatencyModel, Scenario, ScriptEntry};

/// Depth-2 binary HST with leaves a=2, b=3 (under node 1) and c=5, d=6
/// (under node 4). One server at a; requests at b (id 1) and c (id 2);
/// synchronous latencies.
pub fn two_pair_scenario() -> Scenario {
    let hst = hst_from_shape(int(2), 2, &json!([[[], []], [[], []]])).unwrap();
    Scenario::new(Arc::new(hst), vec![2], &[(3, int(0)), (5, int(0))]).unwrap()
}

/// Root 0 with children x=1 (leaves u1=2, u2=3), y=4 (leaf u3=5) and w=6
/// (leaves u4=7, u5=8). Servers at u1 (dummy 0) and u3 (dummy 1); requests
/// r2..r5 (ids 2..5) at u2..u5, all at time 0, synchronous latencies.
///
/// The two messages from u4 and u5 meet at w: the first climbs to the root,
/// the second is turned toward u4 and queues behind r4.
pub fn deflection_scenario() -> Scenario {
    let hst = hst_from_shape(int(2), 2, &json!([[[], []], [[]], [[], []]])).unwrap();
    Scenario::new(Arc::new(hst), vec![2, 5], &[(3, int(0)), (5, int(0)), (7, int(0)), (8, int(0))]).unwrap()
}

/// Ids of the requests in [`detour_scenario`].
pub mod detour {
    use super::RequestId;
    /// Server 1's dummy at leaf p1.
    pub const D1: RequestId = 0;
    /// Server 2's dummy at leaf b1.
    pub const D2: RequestId = 1;
    pub const A: RequestId = 2;
    pub const B: RequestId = 3;
    pub const C: RequestId = 4;
    pub const D: RequestId = 5;
    /// Node id of the subtree holding p1, p2 and p3.
    pub const P: usize = 2;
}

/// Depth-3 HST (edge weights 4, 2, 1). The root has children A=1, B=8 and
/// C=11. A has children P=2 (leaves p1=3, p2=4, p3=5) and Q=6 (leaf q1=7). B
/// and C are chains ending at leaves b1=10 and c1=13.
///
/// Servers sit at p1 and b1. Requests a, b, c, d are invoked at q1, p2, p3
/// and c1 at time 0. The script makes the messages from far away fast and
/// the one from p3 slow, so the server at p1 first leaves P for q1, comes
/// back for b, and c ends up served by the distant second server.
pub fn detour_scenario() -> Scenario {
    let shape = json!([[[[], [], []], [[]]], [[[]]], [[[]]]]);
    let hst = hst_from_shape(int(2), 3, &shape).unwrap();
    let tenth = |n: i128| -> Rational { frac(n, 10) };
    let hop = |msg: RequestId, a: usize, b: usize, l: Rational| ScriptEntry { msg, edge: [a, b], latency: l };
    use detour::*;
    let script = vec![
        hop(A, 7, 6, tenth(1)),
        hop(A, 6, 1, tenth(1)),
        hop(A, 1, 2, tenth(1)),
        hop(A, 2, 3, tenth(1)),
        hop(B, 4, 2, tenth(4)),
        hop(B, 2, 1, tenth(1)),
        hop(B, 1, 6, tenth(1)),
        hop(B, 6, 7, tenth(1)),
        hop(D, 13, 12, tenth(1)),
        hop(D, 12, 11, tenth(1)),
        hop(D, 11, 0, tenth(1)),
        hop(D, 0, 1, tenth(3)),
        hop(D, 1, 2, tenth(1)),
        hop(D, 2, 4, tenth(1)),
        hop(C, 5, 2, tenth(8)),
    ];
    Scenario::new(Arc::new(hst), vec![3, 10], &[(7, int(0)), (4, int(0)), (5, int(0)), (13, int(0))])
        .unwrap()
        .with_latency(LatencyModel::Scripted { script })
}
