"""sentrygate: an inline intrusion prevention proxy for HTTP applications.

The proxy sits between clients and one origin server.  Every request is
normalized, screened by a chain of detectors (connection blacklists, bot
checks, per-parameter validation, session rules, access control), and
either forwarded, challenged, or refused; responses are scrubbed and
instrumented on the way back.  Models for the learned checks are fitted
offline from recorded traffic and shipped as a single JSON bundle.
"""

from .alerts import Alert, ClientIdentity
from .config import Config, ConfigError, Limits, TokenSource
from .httpmsg import RawRequest, Response
from .models import BundleError, ModelBundle
from .pipeline import Pipeline, UpstreamUnreachable, Verdict
from .trace import ReplayClient, TraceRecord, load_trace, replay_trace, save_trace
from .trainer import train_all

__version__ = "0.1.0"

__all__ = [
    "Alert", "BundleError", "ClientIdentity", "Config", "ConfigError",
    "Limits", "ModelBundle", "Pipeline", "RawRequest", "ReplayClient",
    "Response", "TokenSource", "TraceRecord", "UpstreamUnreachable",
    "Verdict", "load_trace", "replay_trace", "save_trace", "train_all",
    "__version__",
]
