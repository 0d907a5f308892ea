use tucl::phantom::{generate, labeled_count, load_dataset, make_dataset, write_dataset, PhantomSpec};
use tucl::volume::Region;
use tucl::Error;

/// Direct count of integer points inside an axis-aligned ellipsoid.
fn brute_force_count(dims: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> usize {
    let mut count = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i as f64, j as f64, k as f64];
                let q: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
                if q <= 1.0 {
                    count += 1;
                }
            }
        }
    }
    count
}

fn spherical_spec() -> PhantomSpec {
    PhantomSpec {
        dims: [24, 24, 24],
        center: [11.5, 11.5, 11.5],
        radii: [6.0, 4.0, 2.0],
        anisotropy: [1.0; 3],
        ..PhantomSpec::default()
    }
}

#[test]
fn region_voxel_counts_match_brute_force() {
    let spec = spherical_spec();
    let (_, mask) = generate(&spec).unwrap();
    for r in Region::ALL {
        let rad = spec.radii[r.index()];
        let expect = brute_force_count(spec.dims, spec.center, [rad; 3]);
        let got = mask.channel(r).iter().filter(|&&v| v == 1.0).count();
        assert_eq!(got, expect, "{r}");
        assert!(got > 0);
    }
}

#[test]
fn anisotropic_counts_match_brute_force() {
    let spec = PhantomSpec {
        anisotropy: [1.0, 0.85, 1.15],
        center: [11.0, 12.0, 11.5],
        ..spherical_spec()
    };
    let (_, mask) = generate(&spec).unwrap();
    for r in Region::ALL {
        let rad = spec.radii[r.index()];
        let radii = [0, 1, 2].map(|a| rad * spec.anisotropy[a]);
        let expect = brute_force_count(spec.dims, spec.center, radii);
        assert_eq!(mask.channel(r).iter().filter(|&&v| v == 1.0).count(), expect);
    }
}

#[test]
fn same_seed_same_phantom() {
    let spec = spherical_spec();
    assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    let other = PhantomSpec { seed: 1, ..spec.clone() };
    assert_ne!(generate(&spec).unwrap().0, generate(&other).unwrap().0);
}

#[test]
fn noiseless_intensities_follow_profile() {
    let spec = PhantomSpec {
        noise_sigma: 0.0,
        base_intensity: [0.1, 0.2, 0.3, 0.4],
        ..spherical_spec()
    };
    let (vol, mask) = generate(&spec).unwrap();
    let n = mask.voxels();
    for v in 0..n {
        for (m, row) in spec.contrast_profile.iter().enumerate() {
            let mut expect = spec.base_intensity[m];
            for r in Region::ALL {
                expect += row[r.index()] * mask.channel(r)[v];
            }
            assert_eq!(vol.intensities().data()[m * n + v], expect);
        }
    }
}

#[test]
fn labeled_counts_for_fractions() {
    for (n, f, want) in [(40, 0.1, 4), (40, 1.0, 40), (10, 0.3, 3), (7, 0.5, 4), (3, 0.01, 1)] {
        assert_eq!(labeled_count(n, f), want);
        let items = make_dataset(n, &PhantomSpec { dims: [8, 8, 8], center: [3.5; 3], radii: [2.5, 1.5, 1.0], ..PhantomSpec::default() }, f, 5).unwrap();
        assert_eq!(items.iter().filter(|i| i.mask.is_some()).count(), want);
    }
}

#[test]
fn invalid_specs_rejected() {
    let bad_radii = PhantomSpec { radii: [2.0, 3.0, 1.0], ..spherical_spec() };
    assert!(matches!(generate(&bad_radii), Err(Error::Parameter(_))));
    let too_big = PhantomSpec { radii: [13.0, 3.0, 1.0], ..spherical_spec() };
    assert!(matches!(generate(&too_big), Err(Error::Parameter(_))));
    let small = PhantomSpec { dims: [6, 24, 24], ..spherical_spec() };
    assert!(matches!(generate(&small), Err(Error::Parameter(_))));
    assert!(matches!(make_dataset(4, &spherical_spec(), 0.0, 1), Err(Error::Parameter(_))));
    assert!(matches!(make_dataset(4, &spherical_spec(), 1.5, 1), Err(Error::Parameter(_))));
}

#[test]
fn dataset_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let base = PhantomSpec { dims: [10, 10, 10], center: [4.5; 3], radii: [3.5, 2.0, 1.0], ..PhantomSpec::default() };
    let items = make_dataset(5, &base, 0.4, 9).unwrap();
    write_dataset(dir.path(), &items, &base, 0.4, 9).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), items);
}
