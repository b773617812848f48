use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use groupcvr_core::profiler::{
    build_profile_text, cosine, encode_users, truncate_matryoshka, EmbeddingClient, EmbeddingClientConfig,
    OfflineEncoder, ProfilerConfig, WindowBounds,
};
use groupcvr_core::synthworld::{attribute_schema, generate_world, AttrValue, Purchase, UserRecord, WorldConfig};
use groupcvr_core::Error;

fn user(id: usize, purchases: &[(usize, f64)]) -> UserRecord {
    UserRecord {
        user_id: id,
        archetype_id: 0,
        attributes: vec![
            Some(AttrValue::Discrete(1)),
            None,
            Some(AttrValue::Discrete(2)),
            Some(AttrValue::Discrete(0)),
            Some(AttrValue::Continuous(0.5)),
        ],
        purchase_log: purchases
            .iter()
            .map(|&(c, t)| Purchase {
                item_id: c * 10,
                category_id: c,
                timestamp: t,
            })
            .collect(),
        search_queries: vec![],
        interaction_count: 1,
        activity_count: purchases.len(),
    }
}

#[test]
fn windowed_counts_match_counting_oracle() {
    let bounds = WindowBounds {
        now: 14.0,
        ..WindowBounds::default()
    };
    let u = user(1, &[(0, 1.0), (0, 13.0), (1, 13.0)]);
    let p = build_profile_text(&u, &attribute_schema(), &bounds);
    let recent: Vec<_> = p.windowed_behaviors[0].iter().map(|(&c, &n)| (c, n)).collect();
    let long: Vec<_> = p.windowed_behaviors[2].iter().map(|(&c, &n)| (c, n)).collect();
    assert_eq!(recent, vec![(0, 1), (1, 1)]);
    assert_eq!(long, vec![(0, 2), (1, 1)]);
    assert_eq!(p, build_profile_text(&u, &attribute_schema(), &bounds));
}

#[test]
fn empty_history_is_marked() {
    let p = build_profile_text(&user(2, &[]), &attribute_schema(), &WindowBounds::default());
    assert!(p.windowed_behaviors.iter().all(|w| w.is_empty()));
    let text = p.render();
    for name in ["recent", "medium", "long"] {
        assert!(text.contains(&format!("{name} purchases: none")), "{text}");
    }
    assert!(text.contains("recent queries: none"));
    assert!(text.contains("age_band=unknown"));
}

#[test]
fn window_bounds_must_be_ordered() {
    let bad = WindowBounds {
        recent: 4.0,
        medium: 4.0,
        ..WindowBounds::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn truncation_examples() {
    let (v, flag) = truncate_matryoshka(&[3.0, 4.0, 0.0, 0.0], 2).unwrap();
    assert_eq!(v, vec![0.6, 0.8]);
    assert!(!flag);
    let (full, _) = truncate_matryoshka(&[1.0, 2.0, 2.0], 3).unwrap();
    assert!((full[0] - 1.0 / 3.0).abs() < 1e-15 && (full[2] - 2.0 / 3.0).abs() < 1e-15);
    let (z, flag) = truncate_matryoshka(&[0.0, 0.0, 1.0], 2).unwrap();
    assert_eq!(z, vec![0.0, 0.0]);
    assert!(flag);
    assert!(truncate_matryoshka(&[1.0], 2).is_err());
}

#[test]
fn offline_encoder_is_deterministic_and_content_driven() {
    let schema = attribute_schema();
    let b = WindowBounds::default();
    let a = build_profile_text(&user(1, &[(3, 2.0), (5, 12.5)]), &schema, &b);
    let same_content = build_profile_text(&user(9, &[(3, 2.0), (5, 12.5)]), &schema, &b);
    let mut enc = OfflineEncoder::new(256);
    let e1 = enc.encode(&a);
    let e2 = OfflineEncoder::new(256).encode(&a);
    assert_eq!(e1, e2);
    assert!(cosine(&e1, &enc.encode(&same_content)) > 0.99);
    let norm: f64 = e1.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
}

#[test]
fn archetypes_separate_in_embedding_space() {
    let cfg = WorldConfig {
        n_users: 600,
        n_archetypes: 20,
        noise_rate: 0.0,
        ..WorldConfig::default()
    };
    let w = generate_world(&cfg, 4).unwrap();
    let pcfg = ProfilerConfig {
        embedding_dim: 128,
        offline_source_dim: 256,
        ..ProfilerConfig::default()
    };
    let embs = encode_users(&w.users, &w.schema, &pcfg).unwrap();
    for e in &embs {
        assert_eq!(e.vector.len(), 128);
        let n: f64 = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    let disjoint = |a: usize, b: usize| {
        w.archetypes[a]
            .category_affinity
            .iter()
            .zip(&w.archetypes[b].category_affinity)
            .all(|(x, y)| *x == 0.0 || *y == 0.0)
    };
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let (ai, aj) = (w.users[i].archetype_id, w.users[j].archetype_id);
            let c = cosine(&embs[i].vector, &embs[j].vector);
            if ai == aj {
                within += c;
                nw += 1;
            } else if disjoint(ai, aj) {
                across += c;
                na += 1;
            }
        }
    }
    let (within, across) = (within / nw as f64, across / na as f64);
    assert!(within > across + 0.2, "within {within} across {across}");
}

/// Minimal HTTP/1.1 embedding server. Each request is answered by
/// `respond(request_index, body)`, returning (status, body).
fn serve<F>(respond: F) -> (String, Arc<AtomicUsize>)
where
    F: Fn(usize, serde_json::Value) -> (u16, String) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; len];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
            let (status, reply) = respond(n, value);
            if status == 0 {
                // Never answer: exercises the client timeout.
                std::thread::sleep(std::time::Duration::from_secs(3));
                continue;
            }
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    (format!("http://{addr}/v1/embeddings"), hits)
}

fn fake_vectors(body: &serde_json::Value) -> String {
    let inputs = body["input"].as_array().unwrap();
    let vecs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| {
            let s = t.as_str().unwrap();
            vec![s.len() as f64, 1.0 / 3.0, s.bytes().map(f64::from).sum::<f64>()]
        })
        .collect();
    serde_json::json!({ "embeddings": vecs }).to_string()
}

fn client_config(endpoint: String) -> EmbeddingClientConfig {
    EmbeddingClientConfig {
        endpoint,
        timeout_secs: 1.0,
        backoff_ms: 5,
        batch_size: 2,
        max_in_flight: 2,
        ..EmbeddingClientConfig::default()
    }
}

#[test]
fn remote_batches_and_caches() {
    let (endpoint, hits) = serve(|_, body| {
        assert!(body["input"].as_array().unwrap().len() <= 2);
        assert_eq!(body["model"], "text-embedding");
        (200, fake_vectors(&body))
    });
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let cfg = EmbeddingClientConfig {
        cache_path: Some(cache.clone()),
        ..client_config(endpoint)
    };
    let texts: Vec<(usize, String)> = (0..5).map(|i| (i, format!("profile {i}"))).collect();
    let first = EmbeddingClient::new(cfg.clone()).unwrap().embed(&texts).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert_eq!(
        first[4],
        vec![9.0, 1.0 / 3.0, "profile 4".bytes().map(f64::from).sum::<f64>()]
    );

    let second = EmbeddingClient::new(cfg).unwrap().embed(&texts).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 3, "cache hits must not call the service");
    for (a, b) in first.iter().zip(&second) {
        let bits = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(std::fs::read_to_string(&cache).unwrap().lines().count(), 5);
}

#[test]
fn remote_retries_server_errors() {
    let (endpoint, hits) = serve(|n, body| {
        if n == 0 {
            (503, "{}".into())
        } else {
            (200, fake_vectors(&body))
        }
    });
    let cfg = EmbeddingClientConfig {
        max_in_flight: 1,
        ..client_config(endpoint)
    };
    let out = EmbeddingClient::new(cfg).unwrap().embed(&[(7, "a".into())]).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn remote_failure_names_the_user() {
    let (endpoint, _) = serve(|_, _| (500, "{}".into()));
    let cfg = EmbeddingClientConfig {
        retry_budget: 1,
        ..client_config(endpoint)
    };
    let err = EmbeddingClient::new(cfg)
        .unwrap()
        .embed(&[(42, "a".into())])
        .unwrap_err();
    assert!(matches!(err, Error::Embedding { user_id: 42, .. }), "{err}");
}

#[test]
fn remote_timeout_is_an_error() {
    let (endpoint, _) = serve(|_, _| (0, String::new()));
    let cfg = EmbeddingClientConfig {
        retry_budget: 0,
        timeout_secs: 0.3,
        ..client_config(endpoint)
    };
    let err = EmbeddingClient::new(cfg)
        .unwrap()
        .embed(&[(3, "a".into())])
        .unwrap_err();
    assert!(matches!(err, Error::Embedding { user_id: 3, .. }), "{err}");
}

#[test]
fn corrupt_cache_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    std::fs::write(&cache, "{\"content_hash\":\"ab\",\"dim\":3,\"vector\":[1.0]}\n").unwrap();
    let cfg = EmbeddingClientConfig {
        cache_path: Some(cache),
        ..client_config("http://127.0.0.1:9/unused".into())
    };
    let err = EmbeddingClient::new(cfg)
        .unwrap()
        .embed(&[(1, "x".into())])
        .unwrap_err();
    assert!(matches!(err, Error::CacheCorrupt { .. }), "{err}");
}
