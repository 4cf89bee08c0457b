use iconometer::perturbation::retention;
use iconometer::recognition::ReferenceRecognition;
use iconometer::{recognize, Category, EmbeddingKind, EmbeddingMatrix, ReferenceBank, Thresholds, Variant};

fn cell(id: &str, category: Category, variant: Variant, hit: bool) -> ReferenceRecognition {
    let bank = EmbeddingMatrix::from_rows_normalized(EmbeddingKind::Global, &[[1.0f32, 0.0]], "t").unwrap();
    let bank = ReferenceBank::new(id, category, vec![format!("{id}_ref")], bank).unwrap();
    let gen = if hit { [1.0f32, 0.0] } else { [0.0, 1.0] };
    let gens = EmbeddingMatrix::from_rows_normalized(EmbeddingKind::Global, &[gen], "t").unwrap();
    recognize(&bank, "m", variant, &[format!("{id}_g")], &gens, &Thresholds::default()).unwrap()
}

/// `(category, before, retained, expected percent)` for every model and
/// perturbation in the reference retention table.
const EXPECTED: [(Category, usize, usize, f64); 20] = [
    (Category::Static, 150, 18, 12.0),
    (Category::Static, 150, 41, 27.3),
    (Category::Static, 233, 73, 31.3),
    (Category::Static, 233, 82, 35.2),
    (Category::Static, 183, 49, 26.8),
    (Category::Static, 183, 41, 22.4),
    (Category::Static, 200, 23, 11.5),
    (Category::Static, 200, 25, 12.5),
    (Category::Static, 214, 51, 23.8),
    (Category::Static, 214, 59, 27.6),
    (Category::Dynamic, 266, 45, 16.9),
    (Category::Dynamic, 266, 123, 46.2),
    (Category::Dynamic, 320, 108, 33.8),
    (Category::Dynamic, 320, 140, 43.8),
    (Category::Dynamic, 340, 40, 11.8),
    (Category::Dynamic, 340, 84, 24.7),
    (Category::Dynamic, 343, 70, 20.4),
    (Category::Dynamic, 343, 137, 39.9),
    (Category::Dynamic, 268, 41, 15.3),
    (Category::Dynamic, 268, 115, 42.9),
];

#[test]
fn reference_retention_percentages() {
    for (i, (category, before, retained, pct)) in EXPECTED.into_iter().enumerate() {
        let variant = if i % 2 == 0 { Variant::Synonym } else { Variant::Description };
        // 50 extra references unrecognized before; half of them recognized after
        let n = before + 50;
        let b: Vec<_> = (0..n).map(|j| cell(&format!("r{j}"), category, Variant::Original, j < before)).collect();
        let a: Vec<_> = (0..n)
            .map(|j| cell(&format!("r{j}"), category, variant, j < retained || j >= before + 25))
            .collect();
        let r = retention(&b, &a).unwrap();
        assert_eq!((r.recognized_before, r.retained), (before, retained));
        let got = r.retention_rate.unwrap() * 100.0;
        assert!((got - pct).abs() <= 0.05, "{before}/{retained}: {got} vs {pct}");
    }
}
