use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{ChatBackend, ChatExchange, ChatRequest, GatewayError, Origin, Usage};

/// Serves a fixed script of responses in FIFO order.
///
/// Order is the call order, so concurrent callers see a nondeterministic
/// interleaving; use [`FnBackend`] when requests run in parallel.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    script: Mutex<VecDeque<Result<String, String>>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            script: Mutex::new(responses.into_iter().map(|s| Ok(s.into())).collect()),
            log: Mutex::default(),
        }
    }

    /// Appends a step that fails with the given message.
    pub fn push_failure(&self, message: impl Into<String>) {
        self.script.lock().unwrap().push_back(Err(message.into()));
    }

    pub fn push(&self, response: impl Into<String>) {
        self.script.lock().unwrap().push_back(Ok(response.into()));
    }

    pub fn calls(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatExchange, GatewayError> {
        let step = {
            let mut log = self.log.lock().unwrap();
            let step = self.script.lock().unwrap().pop_front();
            if step.is_none() {
                return Err(GatewayError::ScriptExhausted { served: log.len() });
            }
            log.push(request.clone());
            step.unwrap()
        };
        let text = step.map_err(GatewayError::Scripted)?;
        Ok(ChatExchange {
            request: request.clone(),
            usage: Usage::approximate(&request.prompt_text(), &text),
            response_text: text,
            origin: Origin::Mock,
        })
    }
}

/// Answers each request with a pure function of the request.
pub struct FnBackend<F> {
    respond: F,
    calls: AtomicUsize,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> String + Send + Sync,
{
    pub fn new(respond: F) -> Self {
        Self {
            respond,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> String + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<ChatExchange, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.respond)(request);
        Ok(ChatExchange {
            request: request.clone(),
            usage: Usage::approximate(&request.prompt_text(), &text),
            response_text: text,
            origin: Origin::Mock,
        })
    }
}

/// Refuses every call and counts the attempts. Stands in for a live endpoint
/// where a test must prove no network activity happens.
#[derive(Debug, Default)]
pub struct FailingBackend {
    attempts: AtomicUsize,
}

impl FailingBackend {
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl ChatBackend for FailingBackend {
    fn complete(&self, _request: &ChatRequest) -> Result<ChatExchange, GatewayError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(GatewayError::LiveCallRefused(
            "live calls are disabled".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_hello() {
        let b = ScriptedBackend::new(["hello"]);
        let ex = b.complete(&ChatRequest::user("m", "hi")).unwrap();
        assert_eq!(ex.response_text, "hello");
        assert_eq!(ex.origin, Origin::Mock);
        assert!(matches!(
            b.complete(&ChatRequest::user("m", "hi")),
            Err(GatewayError::ScriptExhausted { served: 1 })
        ));
    }

    #[test]
    fn scripted_failure_step() {
        let b = ScriptedBackend::new(["a"]);
        b.push_failure("boom");
        b.push("c");
        let r = ChatRequest::user("m", "x");
        assert!(b.complete(&r).is_ok());
        assert!(matches!(b.complete(&r), Err(GatewayError::Scripted(_))));
        assert_eq!(b.complete(&r).unwrap().response_text, "c");
    }

    #[test]
    fn fn_backend_counts() {
        let b = FnBackend::new(|r: &ChatRequest| r.sample_tag.clone());
        let ex = b
            .complete(&ChatRequest::user("m", "x").with_sample_tag("7"))
            .unwrap();
        assert_eq!(ex.response_text, "7");
        assert_eq!(b.calls(), 1);
    }
}
