use cgnscope_core::probe::{stun_classify, ttl_enumerate, ProbePlan, SimProbe, StunMapping};
use cgnscope_core::sim::{MappingType, NatConfig, Pooling, PortAlloc, TopologyBuilder};
use cgnscope_core::synth::probe::{matrix_cases, run_matrix_case, ttl_chain, SERVER, SERVER_IPS};

#[test]
fn matrix_recovers_every_configuration() {
    let cases = matrix_cases();
    assert_eq!(cases.len(), 32);
    let mut total_ms = 0;
    for (i, c) in cases.iter().enumerate() {
        let o = run_matrix_case(c, 1000 + i as u64).unwrap();
        assert!(
            o.recovered(),
            "{c:?}: stun {:?} strategies {:?} chunk {:?} pooling {:?}",
            o.stun.mapping,
            o.strategies,
            o.chunk_size,
            o.pooling
        );
        total_ms += o.virtual_ms;
    }
    assert!(total_ms < 60_000, "{total_ms}");
}

#[test]
fn cgn_behind_cpe_reports_the_most_restrictive() {
    let mut cpe = NatConfig::home("100.64.0.2".parse().unwrap(), "192.168.1.0/24".parse().unwrap());
    cpe.mapping_type = MappingType::FullCone;
    let mut cgn = NatConfig::home("203.0.113.1".parse().unwrap(), "100.64.0.0/10".parse().unwrap());
    cgn.mapping_type = MappingType::Symmetric;
    cgn.port_alloc = PortAlloc::Random;
    cgn.pooling = Pooling::Paired;
    let mut b = TopologyBuilder::new(3);
    let hops = b.chain(vec![Some(cpe), None, Some(cgn)]);
    b.host("client", vec!["192.168.1.10".parse().unwrap()], Some(hops[0]));
    b.host(SERVER, SERVER_IPS.to_vec(), None);
    let mut p = SimProbe::new(b.build().unwrap(), "client", SERVER).unwrap();
    assert_eq!(stun_classify(&mut p).unwrap().mapping, StunMapping::Symmetric);
}

#[test]
fn open_path() {
    let mut b = TopologyBuilder::new(3);
    let hops = b.chain(vec![None, None]);
    b.host("client", vec!["8.8.4.4".parse().unwrap()], Some(hops[0]));
    b.host(SERVER, SERVER_IPS.to_vec(), None);
    let mut p = SimProbe::new(b.build().unwrap(), "client", SERVER).unwrap();
    let o = stun_classify(&mut p).unwrap();
    assert_eq!(o.mapping, StunMapping::Open);
    assert_eq!(o.test1, o.local);
    let r = ttl_enumerate(&mut p, 30, &ProbePlan::default()).unwrap();
    assert!(r.nats.is_empty() && !r.address_mismatch);
}

#[test]
fn ttl_on_chain() {
    let topo = ttl_chain(3, 60, 6, 300, 9).unwrap();
    let mut p = SimProbe::new(topo, "client", SERVER).unwrap();
    let r = ttl_enumerate(&mut p, 30, &ProbePlan::default()).unwrap();
    assert_eq!(r.hop_count, Some(6));
    assert_eq!(r.nats.len(), 1, "{r:?}");
    assert_eq!((r.nats[0].hop, r.nats[0].timeout_low, r.nats[0].timeout_high), (3, 60, 70));
    assert!(r.address_mismatch);

    let topo = ttl_chain(4, 300, 6, 300, 9).unwrap();
    let mut p = SimProbe::new(topo, "client", SERVER).unwrap();
    let r = ttl_enumerate(&mut p, 30, &ProbePlan::default()).unwrap();
    assert!(r.nats.is_empty() && r.address_mismatch);
}
