use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tagrelay::{
    decode_advertisement, decrypt_report, derive_epoch_keypair, encode_advertisement, encrypt_report, key_id,
    LocationPayload, MasterSecret, TagStatus,
};

fn protocol(c: &mut Criterion) {
    let secret = MasterSecret::new([7; 32], 0);
    let kp = derive_epoch_keypair(&secret, 3);
    let key = *kp.public_key.as_bytes();
    let adv = encode_advertisement(&key, TagStatus::LOST).unwrap();

    c.bench_function("derive_epoch_keypair", |b| b.iter(|| derive_epoch_keypair(black_box(&secret), black_box(3))));
    c.bench_function("encode_advertisement", |b| b.iter(|| encode_advertisement(black_box(&key), TagStatus::LOST)));
    c.bench_function("decode_advertisement", |b| b.iter(|| decode_advertisement(black_box(&adv))));
    c.bench_function("key_id", |b| b.iter(|| key_id(black_box(&key))));
}

fn reports(c: &mut Criterion) {
    let kp = derive_epoch_keypair(&MasterSecret::new([7; 32], 0), 0);
    let payload = LocationPayload::new(48.2082, 16.3738, 10, 1_000).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let report = encrypt_report(&payload, kp.public_key.as_bytes(), &mut rng).unwrap();

    c.bench_function("encrypt_report", |b| {
        b.iter(|| encrypt_report(black_box(&payload), kp.public_key.as_bytes(), &mut rng))
    });
    c.bench_function("decrypt_report", |b| b.iter(|| decrypt_report(black_box(&report), &kp.private_scalar)));
}

criterion_group!(benches, protocol, reports);
criterion_main!(benches);
