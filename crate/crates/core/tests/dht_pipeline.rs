use cgnscope_core::detect::dht::detect_dht;
use cgnscope_core::record::Verdict;
use cgnscope_core::report::{aggregate, Population};
use cgnscope_core::synth::dht::{synth_peer_records, AsKind, DhtSynthConfig};

#[test]
fn small_population_is_classified_exactly() {
    let fx = synth_peer_records(&DhtSynthConfig::mixed(5, 7)).unwrap();
    let verdicts = detect_dht(&fx.records, &fx.table);
    assert_eq!(verdicts.len(), 5);
    for v in &verdicts {
        let truth = &fx.truth[&v.asn];
        assert_eq!(v.verdict == Verdict::CgnPositive, truth.detectable, "{v:?} {truth:?}");
    }
}

#[test]
fn fifty_ases_with_ten_carriers_report_ten_positives() {
    let mut cfg = DhtSynthConfig::mixed(50, 11);
    cfg.kinds = (0..50)
        .map(|i| match i % 5 {
            0 => AsKind::CgnPooled,
            1..=3 => AsKind::HomeNat,
            _ => AsKind::SubThreshold,
        })
        .collect();
    let fx = synth_peer_records(&cfg).unwrap();
    let verdicts = detect_dht(&fx.records, &fx.table);
    let population = Population::new("routed", fx.truth.keys().copied());
    let report = aggregate(&verdicts, &[population]).unwrap();
    let union = report.rows.iter().find(|r| r.method == "union").unwrap();
    assert_eq!(union.ases, 50);
    assert_eq!(union.covered, 50);
    assert_eq!(union.positive, 10);
}
