use std::time::Instant;

use sigmeta::synthdata::generate_dataset;

#[test]
fn hundred_writers_in_under_a_minute() {
    let t = Instant::now();
    let users = generate_dataset(100, 2).unwrap();
    let elapsed = t.elapsed();
    assert_eq!(users.len(), 100);
    assert!(users.iter().all(|u| u.genuine.len() == 24 && u.skilled.len() == 30));
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
}
