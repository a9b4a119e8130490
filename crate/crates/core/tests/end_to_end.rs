use robust::butterfly::Topology;
use robust::cluster::{Cluster, LookupRequest, RequestBatch, WriteRequest};
use robust::lookup_protocol::LookupOutcome;
use robust::params::Params;

fn cluster(k: usize, d: usize, c: usize, budget: usize, seed: u64) -> Cluster {
    let params = Params::new(Topology::new(k, d).unwrap())
        .with_c(c)
        .with_payload_len(16)
        .with_crash_budget(budget);
    params.validate().unwrap();
    Cluster::new(params, seed)
}

fn payload(key: u64, tag: u8) -> Vec<u8> {
    (0..16).map(|i| (key as u8).wrapping_mul(31).wrapping_add(i).wrapping_add(tag)).collect()
}

#[test]
fn written_items_are_found_after_a_crash() {
    let mut cl = cluster(3, 3, 12, 2, 7);
    cl.params = cl.params.clone().with_p(2);
    let n = cl.n();
    let writes = (0..n)
        .map(|s| WriteRequest {
            server: s,
            key: (s as u64) * 5 + 1,
            payload: payload(s as u64 * 5 + 1, 0),
        })
        .collect();
    let out = cl.run_period(&[], RequestBatch { writes, lookups: vec![] }).unwrap();
    assert!(out.aborted.is_none(), "{:?}", out.aborted);

    let lookups = (0..n)
        .map(|s| LookupRequest {
            server: s,
            key: (((s + 3) % n) as u64) * 5 + 1,
        })
        .collect();
    let out = cl.run_period(&[4, 11], RequestBatch { writes: vec![], lookups }).unwrap();
    assert!(out.aborted.is_none(), "{:?}", out.aborted);
    for (req, outcome) in &out.lookups {
        match outcome {
            LookupOutcome::Answered { payload: p, .. } => assert_eq!(p, &payload(req.key, 0)),
            other => panic!("lookup {req:?} gave {other:?}"),
        }
    }
}

#[test]
fn missing_keys_report_not_exists() {
    let mut cl = cluster(3, 2, 9, 1, 3);
    let writes = vec![WriteRequest {
        server: 0,
        key: 2,
        payload: payload(2, 1),
    }];
    cl.run_period(&[], RequestBatch { writes, lookups: vec![] }).unwrap();
    let lookups = vec![LookupRequest { server: 5, key: 3 }, LookupRequest { server: 6, key: 2 }];
    let out = cl.run_period(&[], RequestBatch { writes: vec![], lookups }).unwrap();
    assert_eq!(out.lookups[0].1, LookupOutcome::NotExists);
    assert!(matches!(out.lookups[1].1, LookupOutcome::Answered { .. }));
}
