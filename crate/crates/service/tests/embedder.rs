mod common;

use std::collections::HashMap;
use std::time::Duration;

use common::{start_stub, Stub};
use lens_service::{EmbedderClient, EmbedderError};

fn texts(t: &[&str]) -> Vec<String> {
    t.iter().map(|s| s.to_string()).collect()
}

#[tokio::test]
async fn empty_input_is_an_error() {
    let client = EmbedderClient::new("http://127.0.0.1:9", 8);
    assert!(matches!(client.embed_texts(&[]).await, Err(EmbedderError::EmptyInput)));
    assert!(matches!(client.embed_images(vec![]).await, Err(EmbedderError::EmptyInput)));
}

#[tokio::test]
async fn wrong_dimension_rejected() {
    let url = start_stub(Stub {
        dim: 384,
        ..Stub::default()
    })
    .await;
    let client = EmbedderClient::new(url, 512);
    let err = client.embed_texts(&texts(&["a"])).await.unwrap_err();
    assert!(matches!(err, EmbedderError::DimMismatch { expected: 512, found: 384 }), "{err}");

    // announced dimension right, vectors wrong
    let url = start_stub(Stub {
        dim: 4,
        reported_dim: Some(8),
        ..Stub::default()
    })
    .await;
    let err = EmbedderClient::new(url, 8).embed_texts(&texts(&["a"])).await.unwrap_err();
    assert!(matches!(err, EmbedderError::DimMismatch { expected: 8, found: 4 }), "{err}");
}

#[tokio::test]
async fn batches_preserve_order_and_match_single_calls() {
    let url = start_stub(Stub {
        dim: 8,
        table: HashMap::from([("fixed".to_string(), vec![1.0; 8])]),
        ..Stub::default()
    })
    .await;
    let client = EmbedderClient::new(url, 8);
    let batch = client.embed_texts(&texts(&["cat", "fixed", "dog", "cat"])).await.unwrap();
    assert_eq!(batch.len(), 4);
    assert_eq!(batch[1].as_slice(), &[1.0; 8]);
    assert_eq!(batch[0], batch[3]);
    for (i, t) in ["cat", "fixed", "dog"].iter().enumerate() {
        let single = client.embed_texts(&texts(&[t])).await.unwrap();
        assert_eq!(single[0], batch[i]);
    }
}

#[tokio::test]
async fn nondeterministic_sidecar_detected() {
    let url = start_stub(Stub {
        dim: 8,
        nondeterministic: true,
        ..Stub::default()
    })
    .await;
    let client = EmbedderClient::new(url, 8);
    let err = client.embed_texts(&texts(&["cat", "cat"])).await.unwrap_err();
    assert!(matches!(err, EmbedderError::NonDeterministic(ref t) if t == "cat"), "{err}");
}

#[tokio::test]
async fn unreachable_sidecar_is_unavailable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = EmbedderClient::with_timeout(format!("http://{addr}"), 8, Duration::from_secs(2));
    let err = client.embed_texts(&texts(&["a"])).await.unwrap_err();
    assert!(matches!(err, EmbedderError::Unavailable(_)), "{err}");
}

#[tokio::test]
async fn images_embedded_in_order() {
    let url = start_stub(Stub {
        dim: 6,
        ..Stub::default()
    })
    .await;
    let client = EmbedderClient::new(url, 6);
    let images = vec![("a.png".to_string(), vec![1u8, 2, 3]), ("b.png".to_string(), vec![4u8])];
    let out = client.embed_images(images).await.unwrap();
    assert_eq!(out.len(), 2);
    assert_ne!(out[0], out[1]);
}
