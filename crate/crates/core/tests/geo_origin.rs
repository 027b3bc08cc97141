use std::net::Ipv4Addr;

use cawal_core::model::{classify_origin, geo_lookup, Cidr, GeoEntry, GeoTable, OriginClass, UNKNOWN_COUNTRY};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_scan(ip: Ipv4Addr, table: &[GeoEntry]) -> &str {
    let n = u32::from(ip);
    table
        .iter()
        .find(|e| e.ip_range_start <= n && n <= e.ip_range_end)
        .map_or(UNKNOWN_COUNTRY, |e| e.country.as_str())
}

fn random_table(rng: &mut ChaCha8Rng, n: usize) -> Vec<GeoEntry> {
    let mut bounds: Vec<u32> = (0..2 * n).map(|_| rng.random()).collect();
    bounds.sort_unstable();
    bounds.dedup();
    bounds
        .chunks_exact(2)
        .enumerate()
        .map(|(i, c)| GeoEntry {
            ip_range_start: c[0],
            ip_range_end: c[1],
            country: format!("C{}", i % 7),
        })
        .collect()
}

#[test]
fn bundled_table_matches_linear_scan() {
    let table = GeoTable::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for e in table.entries() {
        for n in [e.ip_range_start, e.ip_range_end, e.ip_range_start.wrapping_sub(1), e.ip_range_end.wrapping_add(1)] {
            let ip = Ipv4Addr::from(n);
            assert_eq!(geo_lookup(ip, table.entries()), linear_scan(ip, table.entries()), "{ip}");
        }
    }
    for _ in 0..10_000 {
        let ip = Ipv4Addr::from(rng.random::<u32>());
        assert_eq!(table.lookup(ip), linear_scan(ip, table.entries()), "{ip}");
    }
}

#[test]
fn random_tables_match_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let size = rng.random_range(0..200);
        let entries = random_table(&mut rng, size);
        let table = GeoTable::new(entries).unwrap();
        for _ in 0..500 {
            let ip = Ipv4Addr::from(rng.random::<u32>());
            assert_eq!(table.lookup(ip), linear_scan(ip, table.entries()));
        }
        for e in table.entries() {
            let ip = Ipv4Addr::from(e.ip_range_end);
            assert_eq!(table.lookup(ip), e.country);
        }
    }
}

#[test]
fn overlapping_tables_are_rejected() {
    let e = |a: u32, b: u32| GeoEntry {
        ip_range_start: a,
        ip_range_end: b,
        country: "TR".into(),
    };
    assert!(GeoTable::new(vec![e(10, 20), e(20, 30)]).is_err());
    assert!(GeoTable::new(vec![e(10, 20), e(5, 8)]).is_err());
    assert!(GeoTable::new(vec![e(10, 5)]).is_err());
    assert!(GeoTable::new(vec![e(0, 0), e(1, u32::MAX)]).is_ok());
}

proptest! {
    #[test]
    fn origin_classes_partition_addresses(n in any::<u32>(), prefix in 8u8..=30, base in any::<u32>()) {
        let table = GeoTable::bundled();
        let cidr = Cidr::new(Ipv4Addr::from(base), prefix).unwrap();
        let ip = Ipv4Addr::from(n);
        let class = classify_origin(ip, &[cidr], "TR", table.entries());
        let in_house = cidr.contains(ip);
        let home = table.lookup(ip) == "TR";
        let expected = if in_house {
            OriginClass::InHouse
        } else if home {
            OriginClass::InCountry
        } else {
            OriginClass::OutCountry
        };
        prop_assert_eq!(class, expected);
    }

    #[test]
    fn cidr_contains_exactly_its_block(n in any::<u32>(), prefix in 0u8..=32, base in any::<u32>()) {
        let cidr = Cidr::new(Ipv4Addr::from(base), prefix).unwrap();
        let first = u32::from(cidr.first()) as u64;
        let inside = (n as u64) >= first && (n as u64) < first + cidr.size();
        prop_assert_eq!(cidr.contains(Ipv4Addr::from(n)), inside);
        let round: Cidr = cidr.to_string().parse().unwrap();
        prop_assert_eq!(round, cidr);
    }
}
