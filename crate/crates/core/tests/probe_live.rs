use std::net::SocketAddrV4;
use std::time::Duration;

use cgnscope_core::probe::live::{live_port_session, serve, LiveStun, LiveTtl, ServerConfig};
use cgnscope_core::probe::{hop_count, infer_flows, stun_classify, PortStrategy, StunMapping, TtlDriver};

fn loopback() -> ServerConfig {
    let any: SocketAddrV4 = "127.0.0.1:0".parse().unwrap();
    ServerConfig {
        echo: any,
        ttl_data: any,
        ttl_control: any,
        stun_ips: vec!["127.0.0.1".parse().unwrap()],
        stun_ports: vec![0],
    }
}

#[test]
fn loopback_echo_preserves_ports() {
    let h = serve(&loopback()).unwrap();
    let flows = live_port_session(h.addr("echo").unwrap(), 10, Duration::from_secs(2)).unwrap();
    assert_eq!(flows.len(), 10);
    assert!(flows.iter().all(|f| f.local_port == f.observed_ext_port));
    assert_eq!(infer_flows(&flows).unwrap(), PortStrategy::Preserved);
    h.stop();
}

#[test]
fn loopback_stun_is_open() {
    let h = serve(&loopback()).unwrap();
    let mut d =
        LiveStun::new("127.0.0.1:0".parse().unwrap(), h.addr("stun").unwrap(), Duration::from_millis(300)).unwrap();
    assert_eq!(stun_classify(&mut d).unwrap().mapping, StunMapping::Open);
}

#[test]
fn loopback_ttl_control() {
    let h = serve(&loopback()).unwrap();
    let mut d =
        LiveTtl::new(h.addr("ttl_data").unwrap(), h.addr("ttl_control").unwrap(), Duration::from_millis(500)).unwrap();
    let seen = d.open_flow().unwrap().unwrap();
    assert_eq!(*seen.ip(), d.local_ip());
    assert!(d.client_send(1).unwrap());
    assert!(d.server_send(1).unwrap());
    assert_eq!(hop_count(&mut d, 4).unwrap(), Some(0));
}
