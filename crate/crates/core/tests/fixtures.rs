//! Frozen-artifact checks: the golden side-channel bitstream and the
//! hand-computed architecture audit.

use cdre_core::backbone::BackboneFamily;
use cdre_core::distortion::{deserialize, serialize};
use cdre_core::eval::cost_report;
use cdre_core::training::{CdreModel, ModelConfig};

const GOLDEN: &[u8] = include_bytes!("data/golden.cdrd");
const AUDIT: &str = include_str!("data/architecture_audit.csv");

/// The golden file decodes to the pinned bit grid and re-serializes to
/// the identical bytes.
#[test]
fn golden_side_channel_fixture() {
    let b = deserialize(GOLDEN).expect("golden fixture must parse");
    assert_eq!(
        (b.channels, b.latent_h, b.latent_w, b.source_h, b.source_w),
        (6, 4, 4, 100, 128)
    );
    for (i, &bit) in b.bits().iter().enumerate() {
        let expect = u8::from((i * 37 + 11) % 3 == 0);
        assert_eq!(bit, expect, "bit {i}");
    }
    assert_eq!(serialize(&b), GOLDEN);
}

/// Every layer's analytic parameter and MAC count matches the frozen,
/// hand-computed audit table at 1280x720.
#[test]
fn architecture_audit_matches_hand_computation() {
    let model = CdreModel::new(ModelConfig::cdre(BackboneFamily::Cnn), 0).unwrap();
    let report = cost_report(&model, 720, 1280);

    let mut audited = 0usize;
    for line in AUDIT.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let name = fields.next().unwrap();
        let group = fields.next().unwrap();
        let params: usize = fields.next().unwrap().parse().unwrap();
        let macs: u64 = fields.next().unwrap().parse().unwrap();
        let row = report
            .iter()
            .find(|c| c.name == name)
            .unwrap_or_else(|| panic!("cost report lacks layer {name}"));
        assert_eq!(row.group.as_str(), group, "{name} group");
        assert_eq!(row.params, params, "{name} params");
        assert_eq!(row.macs, macs, "{name} macs");
        audited += 1;
    }
    // the audit covers the whole report
    assert_eq!(audited, report.len(), "audit file row count");
}
