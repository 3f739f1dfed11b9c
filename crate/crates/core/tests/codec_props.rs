use imr_core::record::{decode_record, encode_record, DeltaRecord, KvRecord, MapKey, MrbgEdge, Record, StructureEntry};
use imr_core::run::{RunReader, RunWriter};
use proptest::prelude::*;

fn key() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 1..24)
}

fn bytes() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..64)
}

fn map_key() -> impl Strategy<Value = MapKey> {
    (any::<u32>(), any::<u64>()).prop_map(|(p, s)| MapKey::new(p, s))
}

fn kv() -> impl Strategy<Value = KvRecord> {
    (key(), bytes()).prop_map(|(k, v)| KvRecord::new(k, v))
}

fn delta() -> impl Strategy<Value = DeltaRecord> {
    (kv(), map_key(), any::<bool>()).prop_map(|(r, mk, ins)| {
        if ins {
            DeltaRecord::insert(r, mk)
        } else {
            DeltaRecord::delete(r, mk)
        }
    })
}

fn edge() -> impl Strategy<Value = MrbgEdge> {
    (key(), map_key(), prop::option::of(bytes())).prop_map(|(k2, mk, v)| match v {
        Some(v) => MrbgEdge::valued(k2, mk, v),
        None => MrbgEdge::tombstone(k2, mk),
    })
}

fn structure() -> impl Strategy<Value = StructureEntry> {
    (key(), key(), bytes(), map_key()).prop_map(|(dk, sk, sv, map_key)| StructureEntry { dk, sk, sv, map_key })
}

fn round_trip<R: Record + PartialEq>(rec: &R) -> Result<(), TestCaseError> {
    let bytes = encode_record(rec).unwrap();
    let (back, used) = decode_record::<R>(&bytes).unwrap();
    prop_assert_eq!(used, bytes.len());
    prop_assert_eq!(&back, rec);
    // Every strict prefix is rejected rather than misread.
    for cut in [0, 1, bytes.len() / 2, bytes.len() - 1] {
        prop_assert!(decode_record::<R>(&bytes[..cut]).is_err());
    }
    Ok(())
}

/// Writes `records` sorted by run order, then checks the scan and every
/// positioned read against what was written.
fn run_trip<R: Record + Clone + PartialEq>(mut records: Vec<R>) -> Result<(), TestCaseError> {
    records.sort_by(|a, b| a.run_order(b));
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("part.run");
    let mut writer = RunWriter::<R>::create(&path, 9).unwrap();
    let spans: Vec<_> = records.iter().map(|r| writer.append(r).unwrap()).collect();
    writer.finish().unwrap();
    let reader = RunReader::<R>::open(&path).unwrap();
    prop_assert_eq!(reader.header().record_count, records.len() as u64);
    prop_assert_eq!(reader.header().batch_id, 9);
    prop_assert_eq!(&reader.read_all().unwrap(), &records);
    for (span, rec) in spans.iter().zip(&records).rev() {
        prop_assert_eq!(&reader.read_at(*span).unwrap(), rec);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2500))]

    #[test]
    fn kv_round_trip(rec in kv()) {
        round_trip(&rec)?;
    }

    #[test]
    fn delta_round_trip(rec in delta()) {
        round_trip(&rec)?;
    }

    #[test]
    fn edge_round_trip(rec in edge()) {
        round_trip(&rec)?;
    }

    #[test]
    fn structure_round_trip(rec in structure()) {
        round_trip(&rec)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kv_runs_scan_and_seek(records in prop::collection::vec(kv(), 0..80)) {
        run_trip(records)?;
    }

    #[test]
    fn edge_runs_scan_and_seek(records in prop::collection::vec(edge(), 0..80)) {
        run_trip(records)?;
    }

    #[test]
    fn structure_runs_scan_and_seek(records in prop::collection::vec(structure(), 0..80)) {
        run_trip(records)?;
    }
}
