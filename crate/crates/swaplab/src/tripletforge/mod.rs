//! Triplet construction: supervised face-swap examples with exact ground
//! truth.
//!
//! A triplet starts from two shots of the same identity (A1, A2) plus an
//! unrelated donor face B. A proxy swapper produces the pseudo target B̃ =
//! swap(source B, target A2): B's identity wearing A2's attributes. Training
//! then asks the model to swap A1 onto B̃ — and because A1 and A2 share an
//! identity, the exact expected output is A2 itself. No perceptual judgment
//! is involved anywhere: supervision is a rendered image we can diff.
//!
//! Proxies run at the factor level. The oracle proxy recombines factors
//! exactly; the degraded presets imitate the failure modes of real swap
//! tools (noisy attribute preservation, diluted identity transfer) with
//! declared, seeded degradation, so their downstream effect on the trained
//! model is measurable rather than anecdotal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::synthfaces::dataset::save_image_png;
use crate::synthfaces::factors::{
    sample_factors, FactorVector, ATTRIBUTE_DEFS, AT_GLASSES_FLAG,
    AT_LIGHT_DIRECTION, ID_FACE_HEIGHT, ID_FACE_WIDTH, TAU,
};
use crate::synthfaces::render::render;
use crate::tensor::Tensor;
use crate::util::{derive_seed, read_jsonl, rng_for, sha256_hex, write_jsonl};
use crate::{Result, SwapLabError};

/// Default attribute noise (factor units) for the `attr_noisy` preset.
pub const ATTR_NOISE_SIGMA: f64 = 0.08;
/// Source weight of the identity blend for the `id_weak` preset.
pub const ID_BLEND_SOURCE_WEIGHT: f64 = 0.85;

/// Which degradation a proxy applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProxyKind {
    /// Exact factor recombination: perfect identity transfer, perfect
    /// attribute preservation.
    Oracle,
    /// Strong identity, sloppy attributes: Gaussian noise on the target's
    /// attribute factors before rendering.
    AttrNoisy,
    /// Exact attributes, diluted identity: blends source identity with a
    /// residue of the target's.
    IdWeak,
}

/// A pluggable stand-in for an existing face-swap tool, with its degradation
/// knobs declared up front.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxySwapper {
    pub kind: ProxyKind,
    /// σ of the attribute noise (only `AttrNoisy` reads it).
    pub attribute_sigma: f64,
    /// Source share of the identity blend (only `IdWeak` reads it).
    pub identity_blend: f64,
}

impl ProxySwapper {
    pub fn oracle() -> Self {
        ProxySwapper { kind: ProxyKind::Oracle, attribute_sigma: 0.0, identity_blend: 1.0 }
    }

    pub fn attr_noisy() -> Self {
        ProxySwapper {
            kind: ProxyKind::AttrNoisy,
            attribute_sigma: ATTR_NOISE_SIGMA,
            identity_blend: 1.0,
        }
    }

    pub fn id_weak() -> Self {
        ProxySwapper {
            kind: ProxyKind::IdWeak,
            attribute_sigma: 0.0,
            identity_blend: ID_BLEND_SOURCE_WEIGHT,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "oracle" => Ok(Self::oracle()),
            "attr_noisy" => Ok(Self::attr_noisy()),
            "id_weak" => Ok(Self::id_weak()),
            other => Err(SwapLabError::Manifest(format!("unknown proxy preset '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ProxyKind::Oracle => "oracle",
            ProxyKind::AttrNoisy => "attr_noisy",
            ProxyKind::IdWeak => "id_weak",
        }
    }

    /// Factor-level swap: identity from `source`, attributes from `target`,
    /// degraded per preset. `noise_seed` feeds only the `AttrNoisy` draw, so
    /// the other presets are seed-independent.
    pub fn swap_factors(
        &self,
        source: &FactorVector,
        target: &FactorVector,
        noise_seed: u64,
    ) -> Result<FactorVector> {
        source.validate()?;
        target.validate()?;
        let mut out = source.with_attributes_of(target);
        match self.kind {
            ProxyKind::Oracle => {}
            ProxyKind::AttrNoisy => {
                let mut rng = rng_for(noise_seed, "proxy-attr-noise", 0);
                for (i, def) in ATTRIBUTE_DEFS.iter().enumerate() {
                    use rand::Rng;
                    let n: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
                    let noisy = out.attributes[i] + self.attribute_sigma * n;
                    out.attributes[i] = match i {
                        // Circular factor: wrap instead of clamping.
                        AT_LIGHT_DIRECTION => {
                            let w = noisy.rem_euclid(TAU);
                            if w >= TAU { 0.0 } else { w }
                        }
                        // Binary factor: threshold back to {0, 1}.
                        AT_GLASSES_FLAG => {
                            if noisy >= 0.5 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => noisy.clamp(def.lo, def.hi),
                    };
                }
            }
            ProxyKind::IdWeak => {
                let w = self.identity_blend;
                for i in 0..8 {
                    // a + (1-w)·(b-a): exact when a == b, lands inside the
                    // interval because both endpoints do.
                    out.identity[i] =
                        source.identity[i] + (1.0 - w) * (target.identity[i] - source.identity[i]);
                }
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// Image-level swap: render of [`ProxySwapper::swap_factors`].
    pub fn swap_image(
        &self,
        source: &FactorVector,
        target: &FactorVector,
        noise_seed: u64,
    ) -> Result<Tensor> {
        render(&self.swap_factors(source, target, noise_seed)?)
    }
}

/// Exact proxy swap straight to pixels.
pub fn oracle_proxy_swap(source: &FactorVector, target: &FactorVector) -> Result<Tensor> {
    ProxySwapper::oracle().swap_image(source, target, 0)
}

/// Degraded proxy swap by preset name ("attr_noisy" or "id_weak").
pub fn degraded_proxy_swap(
    source: &FactorVector,
    target: &FactorVector,
    preset: &str,
    noise_seed: u64,
) -> Result<Tensor> {
    let proxy = ProxySwapper::by_name(preset)?;
    if proxy.kind == ProxyKind::Oracle {
        return Err(SwapLabError::Manifest("'oracle' is not a degraded preset".into()));
    }
    proxy.swap_image(source, target, noise_seed)
}

/// A face in a triplet: its image file (relative to the manifest) and the
/// factors that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRef {
    pub image: String,
    pub factors: FactorVector,
}

/// The pseudo target with its provenance: which proxy made it and under what
/// noise seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTarget {
    pub image: String,
    pub factors: FactorVector,
    pub proxy_name: String,
    pub noise_seed: u64,
}

/// One supervised swap example: swap `source` onto `pseudo_target`, compare
/// against `ground_truth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub key: String,
    /// A1: the identity provider the model sees.
    pub source: FaceRef,
    /// B̃: the face being swapped onto.
    pub pseudo_target: PseudoTarget,
    /// A2: the exact expected output.
    pub ground_truth: FaceRef,
    /// B: the donor whose identity the proxy planted in B̃.
    pub donor: FaceRef,
    pub control_transform: Option<String>,
    pub pair_seed: u64,
    pub donor_seed: u64,
}

impl TripletRecord {
    /// Deduplication key over the three faces that define the example
    /// (proxy noise does not create a new example).
    pub fn dedup_key(&self) -> String {
        let payload = serde_json::to_vec(&(
            &self.source.factors,
            &self.donor.factors,
            &self.ground_truth.factors,
        ))
        .expect("factor vectors serialize");
        sha256_hex(&payload)
    }
}

/// Builds one triplet: identity pair from `pair_seed`, donor from
/// `donor_seed`, pseudo target through `proxy`. Deterministic.
pub fn build_triplet(pair_seed: u64, donor_seed: u64, proxy: &ProxySwapper) -> Result<TripletRecord> {
    let (a1, a2) =
        crate::synthfaces::factors::make_identity_pair(&mut rng_for(pair_seed, "triplet-pair", 0));
    let mut donor = sample_factors(&mut rng_for(donor_seed, "triplet-donor", 0));
    let mut attempt = 1;
    while donor.identity == a1.identity {
        donor = sample_factors(&mut rng_for(donor_seed, "triplet-donor", attempt));
        attempt += 1;
    }
    let noise_seed = derive_seed(pair_seed, "proxy-noise", donor_seed);
    let b_tilde = proxy.swap_factors(&donor, &a2, noise_seed)?;
    let key = format!("p{pair_seed:016x}_d{donor_seed:016x}");
    Ok(TripletRecord {
        source: FaceRef { image: format!("{key}_src.png"), factors: a1 },
        pseudo_target: PseudoTarget {
            image: format!("{key}_tgt.png"),
            factors: b_tilde,
            proxy_name: proxy.name().to_string(),
            noise_seed,
        },
        ground_truth: FaceRef { image: format!("{key}_gt.png"), factors: a2 },
        donor: FaceRef { image: format!("{key}_donor.png"), factors: donor },
        control_transform: None,
        pair_seed,
        donor_seed,
        key,
    })
}

/// Finetune-data rewrites that teach one controllable behavior each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlTransform {
    /// Strip glasses from the pseudo target while source and ground truth
    /// keep theirs: the model must restore glasses from the source side.
    /// Only valid when source and ground truth agree on the flag.
    PreserveGlasses,
    /// Scramble the pseudo target's face width/height (seeded redraw): its
    /// shape stops carrying information, so the output's shape — graded
    /// against the ground truth — can only come from the source identity.
    TransferFaceShape,
}

impl ControlTransform {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "preserve_glasses" => Ok(ControlTransform::PreserveGlasses),
            "transfer_face_shape" => Ok(ControlTransform::TransferFaceShape),
            other => Err(SwapLabError::Manifest(format!("unknown control transform '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControlTransform::PreserveGlasses => "preserve_glasses",
            ControlTransform::TransferFaceShape => "transfer_face_shape",
        }
    }
}

/// Applies a control transform, returning the rewritten record or an error
/// naming the violated precondition.
pub fn apply_control_transform(
    record: &TripletRecord,
    transform: ControlTransform,
) -> Result<TripletRecord> {
    let mut out = record.clone();
    match transform {
        ControlTransform::PreserveGlasses => {
            let src_flag = record.source.factors.attributes[AT_GLASSES_FLAG];
            let gt_flag = record.ground_truth.factors.attributes[AT_GLASSES_FLAG];
            if src_flag != gt_flag {
                return Err(SwapLabError::Manifest(format!(
                    "record {}: source and ground truth disagree on glasses ({src_flag} vs {gt_flag})",
                    record.key
                )));
            }
            // Only the flag is forced off; darkness has no visible effect once the
            // flag is zero, and leaving it alone keeps glasses-free records untouched.
            out.pseudo_target.factors.attributes[AT_GLASSES_FLAG] = 0.0;
        }
        ControlTransform::TransferFaceShape => {
            let mut rng = rng_for(record.pair_seed, "shape-transform", record.donor_seed);
            use rand::Rng;
            let w = &crate::synthfaces::factors::IDENTITY_DEFS[ID_FACE_WIDTH];
            let h = &crate::synthfaces::factors::IDENTITY_DEFS[ID_FACE_HEIGHT];
            out.pseudo_target.factors.identity[ID_FACE_WIDTH] = rng.random_range(w.lo..w.hi);
            out.pseudo_target.factors.identity[ID_FACE_HEIGHT] = rng.random_range(h.lo..h.hi);
        }
    }
    out.control_transform = Some(transform.name().to_string());
    Ok(out)
}

/// Everything a training or evaluation run needs to know about a triplet set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub proxy: ProxySwapper,
    pub transform: Option<String>,
    pub count: usize,
    pub records: Vec<TripletRecord>,
}

const MANIFEST_HEADER: &str = "triplets.json";
const MANIFEST_RECORDS: &str = "triplets.jsonl";

/// Generates `count` triplets (plus their four images each) under `out_dir`.
///
/// Records rejected by the control transform's precondition are skipped and
/// replaced by later draws; duplicates by [`TripletRecord::dedup_key`] are
/// dropped. Deterministic: same arguments → byte-identical files.
pub fn build_manifest(
    out_dir: &Path,
    count: usize,
    proxy: &ProxySwapper,
    transform: Option<ControlTransform>,
    seed: u64,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(SwapLabError::Manifest("triplet count must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| SwapLabError::io(out_dir.display().to_string(), e))?;
    let mut records = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    let mut index = 0u64;
    while records.len() < count {
        let pair_seed = derive_seed(seed, "pair", index);
        let donor_seed = derive_seed(seed, "donor", index);
        index += 1;
        let record = build_triplet(pair_seed, donor_seed, proxy)?;
        let record = match transform {
            None => record,
            Some(t) => match apply_control_transform(&record, t) {
                Ok(r) => r,
                // Precondition violations are filtered, not fatal.
                Err(SwapLabError::Manifest(_)) => continue,
                Err(e) => return Err(e),
            },
        };
        if !seen.insert(record.dedup_key()) {
            continue;
        }
        save_image_png(&out_dir.join(&record.source.image), &render(&record.source.factors)?)?;
        save_image_png(
            &out_dir.join(&record.pseudo_target.image),
            &render(&record.pseudo_target.factors)?,
        )?;
        save_image_png(
            &out_dir.join(&record.ground_truth.image),
            &render(&record.ground_truth.factors)?,
        )?;
        save_image_png(&out_dir.join(&record.donor.image), &render(&record.donor.factors)?)?;
        records.push(record);
    }
    let manifest = DatasetManifest {
        seed,
        proxy: *proxy,
        transform: transform.map(|t| t.name().to_string()),
        count,
        records,
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

/// Writes the manifest header and records; [`load_triplet_manifest`] inverts it.
pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let header = serde_json::json!({
        "seed": manifest.seed,
        "proxy": manifest.proxy,
        "transform": manifest.transform,
        "count": manifest.count,
    });
    let path = dir.join(MANIFEST_HEADER);
    std::fs::write(&path, serde_json::to_string_pretty(&header)?)
        .map_err(|e| SwapLabError::io(path.display().to_string(), e))?;
    write_jsonl(&dir.join(MANIFEST_RECORDS), &manifest.records)
}

/// Reads a manifest written by [`build_manifest`] / [`write_manifest`].
pub fn load_triplet_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_HEADER);
    let raw = std::fs::read_to_string(&path)
        .map_err(|e| SwapLabError::io(path.display().to_string(), e))?;
    let header: serde_json::Value = serde_json::from_str(&raw)?;
    let records: Vec<TripletRecord> = read_jsonl(&dir.join(MANIFEST_RECORDS))?;
    Ok(DatasetManifest {
        seed: header["seed"].as_u64().ok_or_else(|| {
            SwapLabError::Manifest("manifest header missing numeric 'seed'".into())
        })?,
        proxy: serde_json::from_value(header["proxy"].clone())?,
        transform: serde_json::from_value(header["transform"].clone())?,
        count: header["count"].as_u64().unwrap_or(records.len() as u64) as usize,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks;
    use crate::synthfaces::factors::{AT_YAW, ID_SKIN_HUE};

    fn pair_of_factors(i: u64) -> (FactorVector, FactorVector) {
        (
            sample_factors(&mut rng_for(71, "pf-a", i)),
            sample_factors(&mut rng_for(71, "pf-b", i)),
        )
    }

    #[test]
    fn oracle_swap_recombines_factors_exactly() {
        let (src, tgt) = pair_of_factors(0);
        let p = ProxySwapper::oracle();
        let out = p.swap_factors(&src, &tgt, 123).unwrap();
        assert_eq!(out.identity, src.identity);
        assert_eq!(out.attributes, tgt.attributes);
        // Source = target degenerates to the target itself, down to pixels.
        let same = p.swap_image(&tgt, &tgt, 0).unwrap();
        assert_eq!(same.data, render(&tgt).unwrap().data);
    }

    #[test]
    fn oracle_swap_is_idempotent_in_identity() {
        let (b, a2) = pair_of_factors(1);
        let p = ProxySwapper::oracle();
        let once = p.swap_factors(&b, &a2, 0).unwrap();
        let twice = p.swap_factors(&b, &once, 0).unwrap();
        assert_eq!(once, twice);
        assert_eq!(
            p.swap_image(&b, &once, 0).unwrap().data,
            p.swap_image(&b, &a2, 0).unwrap().data
        );
    }

    #[test]
    fn id_weak_with_equal_inputs_is_exact() {
        let (_, tgt) = pair_of_factors(2);
        let p = ProxySwapper::id_weak();
        let out = p.swap_factors(&tgt, &tgt, 9).unwrap();
        assert_eq!(out, tgt);
        assert_eq!(p.swap_image(&tgt, &tgt, 9).unwrap().data, render(&tgt).unwrap().data);
    }

    #[test]
    fn id_weak_blends_identity_and_keeps_attributes() {
        let (src, tgt) = pair_of_factors(3);
        let out = ProxySwapper::id_weak().swap_factors(&src, &tgt, 0).unwrap();
        assert_eq!(out.attributes, tgt.attributes);
        for i in 0..8 {
            let expected =
                src.identity[i] + (1.0 - ID_BLEND_SOURCE_WEIGHT) * (tgt.identity[i] - src.identity[i]);
            assert_eq!(out.identity[i], expected, "blend mismatch at identity factor {i}");
        }
    }

    #[test]
    fn attr_noisy_is_seeded_and_preserves_identity_exactly() {
        let (src, tgt) = pair_of_factors(4);
        let p = ProxySwapper::attr_noisy();
        let a = p.swap_factors(&src, &tgt, 42).unwrap();
        let b = p.swap_factors(&src, &tgt, 42).unwrap();
        let c = p.swap_factors(&src, &tgt, 43).unwrap();
        assert_eq!(a, b, "same noise seed must reproduce");
        assert_ne!(a.attributes, c.attributes, "distinct seeds should differ");
        assert_eq!(a.identity, src.identity);
        assert_ne!(a.attributes, tgt.attributes);
        a.validate().unwrap();
    }

    #[test]
    fn attr_noisy_error_statistics_match_the_declared_sigma() {
        // Monte-Carlo at the factor level: per continuous factor the RMSE vs
        // the target sits near σ (clamping at interval edges only shrinks it),
        // the glasses flag never flips (0.5 is >6σ away), and identity is
        // untouched.
        let p = ProxySwapper::attr_noisy();
        let n = 1000;
        let mut sq = [0.0f64; 9];
        let mut flag_flips = 0;
        for i in 0..n {
            let (src, tgt) = pair_of_factors(1000 + i as u64);
            let out = p.swap_factors(&src, &tgt, i as u64).unwrap();
            assert_eq!(out.identity, src.identity);
            for k in 0..9 {
                let (a, b) = (out.attributes[k], tgt.attributes[k]);
                let err = if k == AT_LIGHT_DIRECTION {
                    let d = (a - b).rem_euclid(TAU);
                    d.min(TAU - d)
                } else {
                    a - b
                };
                if k == AT_GLASSES_FLAG && a != b {
                    flag_flips += 1;
                }
                sq[k] += err * err;
            }
        }
        assert_eq!(flag_flips, 0, "glasses flag flipped under 0.08σ noise");
        for (k, def) in ATTRIBUTE_DEFS.iter().enumerate() {
            if k == AT_GLASSES_FLAG {
                continue;
            }
            let rmse = (sq[k] / n as f64).sqrt();
            assert!(
                rmse <= ATTR_NOISE_SIGMA * 1.10,
                "{}: rmse {rmse} above sigma",
                def.name
            );
            assert!(
                rmse >= ATTR_NOISE_SIGMA * 0.45,
                "{}: rmse {rmse} suspiciously small",
                def.name
            );
        }
    }

    #[test]
    fn degraded_presets_order_their_error_profiles() {
        // attr_noisy: attribute error > 0, identity error = 0.
        // id_weak: attribute error = 0, identity error > 0.
        let n = 1000;
        let (mut attr_err_noisy, mut id_err_noisy) = (0.0f64, 0.0f64);
        let (mut attr_err_weak, mut id_err_weak) = (0.0f64, 0.0f64);
        for i in 0..n {
            let (src, tgt) = pair_of_factors(5000 + i as u64);
            let noisy = ProxySwapper::attr_noisy().swap_factors(&src, &tgt, i as u64).unwrap();
            let weak = ProxySwapper::id_weak().swap_factors(&src, &tgt, i as u64).unwrap();
            for k in 0..9 {
                attr_err_noisy += (noisy.attributes[k] - tgt.attributes[k]).abs();
                attr_err_weak += (weak.attributes[k] - tgt.attributes[k]).abs();
            }
            for k in 0..8 {
                id_err_noisy += (noisy.identity[k] - src.identity[k]).abs();
                id_err_weak += (weak.identity[k] - src.identity[k]).abs();
            }
        }
        assert!(attr_err_noisy > attr_err_weak, "attribute degradation ordering violated");
        assert!(id_err_weak > id_err_noisy, "identity degradation ordering violated");
        assert_eq!(attr_err_weak, 0.0);
        assert_eq!(id_err_noisy, 0.0);
    }

    #[test]
    fn unknown_preset_is_rejected() {
        let (src, tgt) = pair_of_factors(6);
        assert!(degraded_proxy_swap(&src, &tgt, "sharp", 0).is_err());
        assert!(degraded_proxy_swap(&src, &tgt, "oracle", 0).is_err());
        assert!(ProxySwapper::by_name("attr_noisy").is_ok());
    }

    #[test]
    fn triplets_share_identity_and_record_provenance() {
        let proxy = ProxySwapper::oracle();
        for i in 0..50 {
            let r = build_triplet(100 + i, 900 + i, &proxy).unwrap();
            assert_eq!(r.source.factors.identity, r.ground_truth.factors.identity);
            assert_ne!(r.source.factors.attributes, r.ground_truth.factors.attributes);
            assert_ne!(r.donor.factors.identity, r.source.factors.identity);
            assert_eq!(r.pseudo_target.factors.identity, r.donor.factors.identity);
            assert_eq!(r.pseudo_target.factors.attributes, r.ground_truth.factors.attributes);
            assert_eq!(r.pseudo_target.proxy_name, "oracle");
        }
    }

    #[test]
    fn triplet_building_is_deterministic() {
        let proxy = ProxySwapper::attr_noisy();
        let a = build_triplet(7, 8, &proxy).unwrap();
        let b = build_triplet(7, 8, &proxy).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dedup_key(), b.dedup_key());
        let c = build_triplet(7, 9, &proxy).unwrap();
        assert_ne!(a.dedup_key(), c.dedup_key());
    }

    #[test]
    fn pseudo_target_landmarks_follow_construction() {
        // The pseudo target wears the donor's identity with the ground truth's
        // pose/expression, so extracting its coefficients equals recombining
        // donor identity with ground-truth motion — exactly.
        let r = build_triplet(21, 22, &ProxySwapper::oracle()).unwrap();
        let direct = landmarks::extract(&r.pseudo_target.factors);
        let recombined = landmarks::recombine(
            &landmarks::extract(&r.donor.factors),
            &landmarks::extract(&r.ground_truth.factors),
        );
        assert_eq!(direct, recombined);
        assert_eq!(
            landmarks::render_landmarks(&direct).data,
            landmarks::render_landmarks(&recombined).data
        );
    }

    #[test]
    fn preserve_glasses_strips_them_from_the_pseudo_target_only() {
        let proxy = ProxySwapper::oracle();
        let mut found_wearing = false;
        for i in 0..200 {
            let r = build_triplet(3000 + i, 4000 + i, &proxy).unwrap();
            let src_flag = r.source.factors.attributes[AT_GLASSES_FLAG];
            let gt_flag = r.ground_truth.factors.attributes[AT_GLASSES_FLAG];
            match apply_control_transform(&r, ControlTransform::PreserveGlasses) {
                Ok(out) => {
                    assert_eq!(src_flag, gt_flag, "filter let a mismatched pair through");
                    assert_eq!(out.pseudo_target.factors.attributes[AT_GLASSES_FLAG], 0.0);
                    assert_eq!(out.ground_truth.factors.attributes[AT_GLASSES_FLAG], gt_flag);
                    assert_eq!(out.control_transform.as_deref(), Some("preserve_glasses"));
                    if gt_flag == 1.0 {
                        found_wearing = true;
                        assert_ne!(
                            out.pseudo_target.factors.attributes[AT_GLASSES_FLAG],
                            out.ground_truth.factors.attributes[AT_GLASSES_FLAG],
                        );
                    } else {
                        // Glasses-free pair: the pseudo target is untouched.
                        assert_eq!(out.pseudo_target.factors, r.pseudo_target.factors);
                    }
                }
                Err(_) => assert_ne!(src_flag, gt_flag, "filter rejected a matching pair"),
            }
        }
        assert!(found_wearing, "no glasses-wearing pair in 200 draws");
    }

    #[test]
    fn transfer_face_shape_scrambles_the_pseudo_target_shape() {
        let r = build_triplet(31, 32, &ProxySwapper::oracle()).unwrap();
        let out = apply_control_transform(&r, ControlTransform::TransferFaceShape).unwrap();
        let old = &r.pseudo_target.factors.identity;
        let new = &out.pseudo_target.factors.identity;
        assert_ne!(
            (new[ID_FACE_WIDTH], new[ID_FACE_HEIGHT]),
            (old[ID_FACE_WIDTH], old[ID_FACE_HEIGHT]),
            "shape not rewritten"
        );
        assert_ne!(
            (new[ID_FACE_WIDTH], new[ID_FACE_HEIGHT]),
            (
                r.ground_truth.factors.identity[ID_FACE_WIDTH],
                r.ground_truth.factors.identity[ID_FACE_HEIGHT]
            ),
            "scrambled shape must differ from the ground truth's"
        );
        // Everything else is untouched, and the rewrite is deterministic.
        assert_eq!(new[ID_SKIN_HUE], old[ID_SKIN_HUE]);
        assert_eq!(out.pseudo_target.factors.attributes, r.pseudo_target.factors.attributes);
        let again = apply_control_transform(&r, ControlTransform::TransferFaceShape).unwrap();
        assert_eq!(out, again);
        out.pseudo_target.factors.validate().unwrap();
    }

    #[test]
    fn manifests_are_deterministic_and_round_trip() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let proxy = ProxySwapper::oracle();
        let ma = build_manifest(dir_a.path(), 5, &proxy, None, 99).unwrap();
        let mb = build_manifest(dir_b.path(), 5, &proxy, None, 99).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.records.len(), 5);
        for name in [MANIFEST_HEADER, MANIFEST_RECORDS] {
            let x = std::fs::read(dir_a.path().join(name)).unwrap();
            let y = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between identical builds");
        }
        // Every referenced image exists.
        for r in &ma.records {
            for img in [&r.source.image, &r.pseudo_target.image, &r.ground_truth.image, &r.donor.image]
            {
                assert!(dir_a.path().join(img).exists(), "missing {img}");
            }
        }
        let loaded = load_triplet_manifest(dir_a.path()).unwrap();
        assert_eq!(loaded, ma);
    }

    #[test]
    fn manifest_rejects_zero_count_and_filters_for_glasses() {
        let dir = tempfile::tempdir().unwrap();
        let proxy = ProxySwapper::oracle();
        assert!(build_manifest(dir.path(), 0, &proxy, None, 1).is_err());
        let m = build_manifest(
            dir.path(),
            8,
            &proxy,
            Some(ControlTransform::PreserveGlasses),
            7,
        )
        .unwrap();
        assert_eq!(m.records.len(), 8);
        for r in &m.records {
            assert_eq!(
                r.source.factors.attributes[AT_GLASSES_FLAG],
                r.ground_truth.factors.attributes[AT_GLASSES_FLAG],
            );
            assert_eq!(r.pseudo_target.factors.attributes[AT_GLASSES_FLAG], 0.0);
        }
    }

    #[test]
    fn duplicate_records_are_dropped() {
        let proxy = ProxySwapper::oracle();
        let r = build_triplet(5, 6, &proxy).unwrap();
        let mut seen = std::collections::HashSet::new();
        assert!(seen.insert(r.dedup_key()));
        // Same faces through a different proxy noise seed: same example.
        let mut r2 = build_triplet(5, 6, &proxy).unwrap();
        r2.pseudo_target.noise_seed = 999;
        assert!(!seen.insert(r2.dedup_key()), "noise seed leaked into the dedup key");
    }

    #[test]
    fn yaw_survives_the_pipeline_unchanged_for_oracle_proxy() {
        // Spot check one attribute end to end through triplet construction.
        let r = build_triplet(61, 62, &ProxySwapper::oracle()).unwrap();
        assert_eq!(
            r.pseudo_target.factors.attributes[AT_YAW],
            r.ground_truth.factors.attributes[AT_YAW]
        );
    }
}
