mod common;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use semcom_lab::error::{Error, IdxError};
use semcom_lab::semsource::{fetch_files, load_idx, sha256_hex, RemoteFile, Split, Task};
use semcom_lab::stochastic::Rng64;

fn fixture(dir: &std::path::Path, count: usize, gz: bool) -> (std::path::PathBuf, std::path::PathBuf, Vec<u8>, Vec<u8>) {
    let (px, lb) = common::synthetic_digits(count, &mut Rng64::from_seed(5));
    let (mut img, mut lab) = (common::idx_images(&px, count), common::idx_labels(&lb));
    let suffix = if gz { ".gz" } else { "" };
    if gz {
        img = common::gzip(&img);
        lab = common::gzip(&lab);
    }
    let ip = dir.join(format!("img{suffix}"));
    let lp = dir.join(format!("lab{suffix}"));
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    (ip, lp, px, lb)
}

#[test]
fn loads_plain_and_gzipped_fixtures_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp, px, lb) = fixture(dir.path(), 23, false);
    let plain = load_idx(&ip, &lp, Split::Train).unwrap();
    let (gip, glp, _, _) = fixture(dir.path(), 23, true);
    let gz = load_idx(&gip, &glp, Split::Train).unwrap();
    assert_eq!(plain.images(), gz.images());
    assert_eq!(plain.len(), 23);
    assert_eq!(plain.digits(), &lb[..]);
    assert_eq!(plain.images()[[4, 100]], f64::from(px[4 * 784 + 100]) / 255.0);
    let parity = plain.labels(Task::Binary);
    assert!(parity.iter().zip(&lb).all(|(&p, &d)| p == usize::from(d % 2)));
}

#[test]
fn reports_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp, _, _) = fixture(dir.path(), 5, false);

    let mut bad = std::fs::read(&ip).unwrap();
    bad[3] = 0x01;
    let bad_path = dir.path().join("badmagic");
    std::fs::write(&bad_path, &bad).unwrap();
    assert!(matches!(
        load_idx(&bad_path, &lp, Split::Test),
        Err(Error::Idx(IdxError::BadMagic { found: 0x0801, .. }))
    ));

    let short = std::fs::read(&ip).unwrap();
    let short_path = dir.path().join("short");
    std::fs::write(&short_path, &short[..short.len() - 10]).unwrap();
    assert!(matches!(load_idx(&short_path, &lp, Split::Test), Err(Error::Idx(IdxError::Truncated { .. }))));

    let few = dir.path().join("few");
    std::fs::write(&few, common::idx_labels(&[1, 2, 3])).unwrap();
    assert!(matches!(
        load_idx(&ip, &few, Split::Test),
        Err(Error::Idx(IdxError::CountMismatch { images: 5, labels: 3 }))
    ));

    let range = dir.path().join("range");
    std::fs::write(&range, common::idx_labels(&[1, 2, 3, 11, 0])).unwrap();
    assert!(matches!(load_idx(&ip, &range, Split::Test), Err(Error::Idx(IdxError::LabelRange { .. }))));
}

/// Minimal HTTP/1.1 server answering GETs from a fixed table and counting
/// requests per path.
fn serve(files: HashMap<String, Vec<u8>>) -> (String, Arc<Mutex<HashMap<String, usize>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(Mutex::new(HashMap::new()));
    let counter = Arc::clone(&hits);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request = String::new();
            if reader.read_line(&mut request).is_err() {
                continue;
            }
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
            }
            let path = request.split_whitespace().nth(1).unwrap_or("/").to_string();
            *counter.lock().unwrap().entry(path.clone()).or_insert(0) += 1;
            let (status, body) = match files.get(&path) {
                Some(b) => ("200 OK", b.clone()),
                None => ("404 Not Found", b"missing".to_vec()),
            };
            let head = format!("HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&body);
        }
    });
    (base, hits)
}

#[test]
fn fetch_verifies_digests_and_caches() {
    let payload_a = common::idx_labels(&[1, 2, 3, 4]);
    let payload_b = common::idx_labels(&[9, 9]);
    let spec = [
        RemoteFile {
            name: "a-labels",
            sha256: Box::leak(sha256_hex(&payload_a).into_boxed_str()),
        },
        RemoteFile {
            name: "b-labels",
            sha256: Box::leak(sha256_hex(&payload_b).into_boxed_str()),
        },
    ];
    let files = HashMap::from([
        ("/mirror/a-labels.gz".to_string(), common::gzip(&payload_a)),
        ("/mirror/b-labels.gz".to_string(), common::gzip(&payload_b)),
        ("/bad/a-labels.gz".to_string(), common::gzip(b"tampered")),
    ]);
    let (base, hits) = serve(files);
    let dir = tempfile::tempdir().unwrap();

    let paths = fetch_files(&format!("{base}/mirror"), dir.path(), &spec).unwrap();
    assert_eq!(std::fs::read(&paths[0]).unwrap(), payload_a);
    assert_eq!(std::fs::read(&paths[1]).unwrap(), payload_b);

    // A second call is served from the cache.
    fetch_files(&format!("{base}/mirror"), dir.path(), &spec).unwrap();
    assert_eq!(hits.lock().unwrap()["/mirror/a-labels.gz"], 1);

    // Corrupt cache entries are refetched.
    std::fs::write(&paths[1], b"junk").unwrap();
    fetch_files(&format!("{base}/mirror"), dir.path(), &spec).unwrap();
    assert_eq!(std::fs::read(&paths[1]).unwrap(), payload_b);
    assert_eq!(hits.lock().unwrap()["/mirror/b-labels.gz"], 2);

    // Digest mismatch leaves nothing behind.
    let other = tempfile::tempdir().unwrap();
    let err = fetch_files(&format!("{base}/bad"), other.path(), &spec[..1]).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }), "{err}");
    assert_eq!(std::fs::read_dir(other.path()).unwrap().count(), 0);

    let err = fetch_files(&format!("{base}/nowhere"), other.path(), &spec[..1]).unwrap_err();
    assert!(matches!(err, Error::Http { .. }), "{err}");
}
