use kdlsq::harness::SyntheticTask;

/// Logistic regression on raw token counts, plain batch gradient descent.
fn bag_of_words_probe(task: &SyntheticTask) -> f64 {
    let (train, test) = task.generate().unwrap();
    let features = |tokens: &[usize]| {
        let mut x = vec![0.0; task.vocab + 1];
        for &t in tokens {
            x[t] += 1.0;
        }
        x[task.vocab] = 1.0;
        x
    };
    let xs: Vec<Vec<f64>> = train.examples.iter().map(|e| features(&e.tokens)).collect();
    let ys: Vec<f64> = train.examples.iter().map(|e| e.label as f64).collect();
    let mut w = vec![0.0; task.vocab + 1];
    for _ in 0..1500 {
        let mut grad = vec![0.0; w.len()];
        for (x, y) in xs.iter().zip(&ys) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += (p - y) * xi / xs.len() as f64;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 * g;
        }
    }
    let correct = test
        .examples
        .iter()
        .filter(|e| {
            let z: f64 = features(&e.tokens).iter().zip(&w).map(|(a, b)| a * b).sum();
            (z > 0.0) as usize == e.label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn linear_probe_learns_the_task() {
    let acc = bag_of_words_probe(&SyntheticTask::default());
    assert!(acc >= 0.95, "probe accuracy {acc}");
}

#[test]
fn classes_are_balanced_and_splits_disjoint() {
    let task = SyntheticTask::default();
    let (train, test) = task.generate().unwrap();
    for d in [&train, &test] {
        let ones = d.labels().filter(|&l| l == 1).count() as f64;
        assert!((ones / d.len() as f64 - 0.5).abs() <= 0.05);
    }
    for e in &test.examples {
        assert!(!train.examples.iter().any(|t| t.tokens == e.tokens));
    }
}
