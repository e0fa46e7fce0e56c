"""The session engine: one mailbox, many passwords, one filtered view each.

A client connects, logs in with the account email plus any of the
account's passwords, and the proxy resolves which principal that password
belongs to. The owner gets a byte-transparent relay to the upstream
server. A sub-user gets a read-only, policy-filtered mailbox: hidden
messages are renumbered away, their UIDs never cross the wire, and every
mutating command dies at the proxy with a permission error.

Fail-closed rules, in one place:
  * policy metadata that cannot be fetched or parsed never degrades into
    an unfiltered view — the command fails or the session dies instead;
  * a UIDVALIDITY change mid-session kills the session;
  * upstream traffic the sub-user engine cannot interpret kills the
    session rather than being relayed.
"""

from __future__ import annotations

import base64
import json
import logging
import re
import socket
import ssl
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import imapcodec, store
from .credstore import CredStore
from .errors import (
    AuthFailed,
    ChamailError,
    ConfigError,
    ImapSyntaxError,
    InconsistentInput,
    LiteralTooLarge,
    SessionAborted,
    StoreError,
    UnknownSeq,
    UpstreamUnavailable,
)
from .imapcodec import (
    CRLF,
    Command,
    Continuation,
    Exists,
    ExpungeEvent,
    FetchData,
    ListData,
    RawUntagged,
    Recent,
    SearchData,
    SequenceSet,
    StatusData,
    Tagged,
    UntaggedStatus,
    Verb,
    completion_text,
    parse_fetch_attrs,
    parse_response,
    render_command,
)
from .policy import (
    BODY_EXCERPT_CAP,
    Decision,
    PolicySet,
    evaluate,
    extract_meta,
    sender_constraints_pass,
)
from .principal import Owner, Principal, SubUser
from .viewmap import HIDDEN, ViewMap

log = logging.getLogger("chamail.proxy")

_META_HEADER_FIELDS = "FROM SUBJECT CONTENT-TYPE CONTENT-TRANSFER-ENCODING MIME-VERSION"
_LITERAL_MARKER_RE = re.compile(rb"\{(\d+)(\+?)\}\r\n")

AUTH_FAILED_TEXT = "LOGIN failed"
UPSTREAM_FAILED_TEXT = "upstream unavailable"
PERMISSION_DENIED_TEXT = "Permission denied"


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class UpstreamOverride:
    host: str
    port: int
    use_tls: bool = False


@dataclass(frozen=True)
class ProxyConfig:
    store_path: str
    listen_host: str = "127.0.0.1"
    listen_port: int = 1143
    tls_certfile: str | None = None
    tls_keyfile: str | None = None
    upstream_overrides: dict[str, UpstreamOverride] = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj) -> "ProxyConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config root must be an object")
        try:
            store_path = obj["store"]
            listen = obj.get("listen", {})
            host = listen.get("host", "127.0.0.1")
            port = int(listen.get("port", 1143))
            tls = obj.get("tls")
            certfile = keyfile = None
            if tls is not None:
                certfile = tls["certfile"]
                keyfile = tls["keyfile"]
            overrides = {}
            for email_key, ov in obj.get("upstream_overrides", {}).items():
                overrides[email_key.lower()] = UpstreamOverride(
                    ov["host"], int(ov["port"]), bool(ov.get("use_tls", False))
                )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        if not isinstance(store_path, str):
            raise ConfigError("store path must be a string")
        if not 1 <= port <= 65535:
            raise ConfigError(f"listen port {port} out of range")
        return cls(store_path, host, port, certfile, keyfile, overrides)


def load_config(path: str | Path) -> ProxyConfig:
    try:
        with open(path, "rb") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ProxyConfig.from_json(obj)


# -- upstream connection --------------------------------------------------------


class UpstreamConnection:
    """Blocking IMAP connection to the real server, one per session."""

    def __init__(self, host: str, port: int, use_tls: bool, timeout: float = 10.0):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            if use_tls:
                context = ssl.create_default_context()
                sock = context.wrap_socket(sock, server_hostname=host)
        except OSError as exc:
            raise UpstreamUnavailable(f"cannot connect to {host}:{port}: {exc}") from exc
        sock.settimeout(None)
        self._sock = sock
        self.rfile = sock.makefile("rb")
        self.wfile = sock.makefile("wb")
        self._tag_counter = 0
        greeting = self.read_blob()
        parsed = parse_response(greeting)
        if not (isinstance(parsed, UntaggedStatus) and parsed.status in ("OK", "PREAUTH")):
            self.close()
            raise UpstreamUnavailable(f"unexpected upstream greeting {greeting[:60]!r}")

    def next_tag(self) -> str:
        self._tag_counter += 1
        return f"p{self._tag_counter}"

    def read_blob(self) -> bytes:
        try:
            blob = imapcodec.read_response_blob(self.rfile)
        except (OSError, ImapSyntaxError) as exc:
            raise UpstreamUnavailable(f"upstream read failed: {exc}") from exc
        if blob == b"":
            raise UpstreamUnavailable("upstream closed the connection")
        return blob

    def send_blob(self, blob: bytes) -> list[bytes]:
        """Send command bytes, honoring sync-literal continuations.

        Returns any stray response blobs that arrived while waiting for
        continuation prompts; the caller decides what they mean.
        """
        strays: list[bytes] = []
        pos = 0
        try:
            while True:
                m = _LITERAL_MARKER_RE.search(blob, pos)
                if m is None:
                    self.wfile.write(blob[pos:])
                    self.wfile.flush()
                    return strays
                self.wfile.write(blob[pos : m.end()])
                self.wfile.flush()
                if m.group(2) != b"+":
                    while True:
                        reply = self.read_blob()
                        if reply.startswith(b"+"):
                            break
                        strays.append(reply)
                size = int(m.group(1))
                body_end = m.end() + size
                self.wfile.write(blob[m.end() : body_end])
                pos = body_end
        except OSError as exc:
            raise UpstreamUnavailable(f"upstream write failed: {exc}") from exc

    def close(self) -> None:
        for closer in (self.rfile.close, self.wfile.close, self._sock.close):
            try:
                closer()
            except OSError:
                pass


# -- per-session engine -----------------------------------------------------------


_NOT_AUTH = "NOT_AUTHENTICATED"
_AUTH = "AUTHENTICATED"
_SELECTED = "SELECTED"

_TAGGED_STATUS_RE = re.compile(rb"^([^ ]+) (OK|NO|BAD)(?: |\r\n)")


def _is_tagged_for(blob: bytes, tag: str) -> bool:
    m = _TAGGED_STATUS_RE.match(blob)
    return m is not None and m.group(1) == tag.encode("ascii")


def _same_mailbox(a: str, b: str | None) -> bool:
    if b is None:
        return False
    return a == b or (a.upper() == "INBOX" and b.upper() == "INBOX")


class ClientSession:
    def __init__(self, server: "ProxyServer", conn: socket.socket, peer: str):
        self.server = server
        self.conn = conn
        self.peer = peer
        self.rfile = conn.makefile("rb")
        self.wfile = conn.makefile("wb")
        self.io = imapcodec.StreamCommandIO(self.rfile, self.wfile)
        self.state = _NOT_AUTH
        self.principal: Principal | None = None
        self.email: str | None = None
        self.upstream: UpstreamConnection | None = None
        self.upstream_creds: tuple[str, str] | None = None
        self.upstream_target: tuple[str, int, bool] | None = None
        self.view: ViewMap | None = None
        self.selected_mailbox: str | None = None
        self.active_policy: PolicySet | None = None
        self.active_lists: dict | None = None
        self._pending_exists: int | None = None

    # -- plumbing -------------------------------------------------------------

    def _send(self, data: bytes) -> None:
        self.wfile.write(data)
        self.wfile.flush()

    def _tagged(self, tag: str, status: str, text: str) -> None:
        self._send(f"{tag} {status} {text}\r\n".encode("utf-8"))

    def _is_subuser(self) -> bool:
        return isinstance(self.principal, SubUser)

    # -- main loop ---------------------------------------------------------------

    def run(self) -> None:
        log.info("client connected from %s", self.peer)
        try:
            self._send(imapcodec.GREETING)
            self._loop()
        except (SessionAborted, UpstreamUnavailable) as exc:
            log.warning("session from %s aborted: %s", self.peer, exc)
            try:
                self._send(b"* BYE session terminated\r\n")
            except OSError:
                pass
        except OSError:
            pass
        except Exception:
            log.exception("session from %s crashed", self.peer)
        finally:
            self._close()

    def _close(self) -> None:
        if self.upstream is not None:
            self.upstream.close()
            self.upstream = None
        for closer in (self.rfile.close, self.wfile.close, self.conn.close):
            try:
                closer()
            except OSError:
                pass
        log.info("client %s disconnected", self.peer)

    def _loop(self) -> None:
        while True:
            line = self.rfile.readline()
            if not line:
                return
            try:
                cmd = imapcodec.parse_command(line, self.io)
            except LiteralTooLarge:
                tag = line.split(b" ", 1)[0].decode("ascii", "replace") or "*"
                self._tagged(tag, "BAD", "literal too large")
                return
            except ImapSyntaxError as exc:
                tag = line.split(b" ", 1)[0].decode("ascii", "replace") or "*"
                self._tagged(tag, "BAD", str(exc))
                continue
            if not self._dispatch(cmd):
                return

    def _dispatch(self, cmd: Command) -> bool:
        """Handle one command; False ends the session."""
        verb = cmd.verb
        if verb is Verb.CAPABILITY:
            self._send(
                ("* CAPABILITY " + " ".join(imapcodec.CAPABILITY_TOKENS)).encode() + CRLF
            )
            self._tagged(cmd.tag, "OK", completion_text(cmd.name))
            return True
        if verb is Verb.LOGOUT:
            return self._handle_logout(cmd)

        if self.state == _NOT_AUTH:
            if verb is Verb.LOGIN:
                self._handle_login(cmd, cmd.login)
            elif verb is Verb.AUTHENTICATE:
                self._handle_authenticate(cmd)
            elif verb is Verb.NOOP:
                self._tagged(cmd.tag, "OK", completion_text(cmd.name))
            else:
                self._tagged(cmd.tag, "NO", imapcodec.NOT_AUTHENTICATED_TEXT)
            return True

        # authenticated states ------------------------------------------------
        if self._is_subuser():
            return self._dispatch_subuser(cmd)
        return self._dispatch_owner(cmd)

    # -- authentication ------------------------------------------------------------

    def _handle_authenticate(self, cmd: Command) -> None:
        parts = cmd.rest.split()
        if not parts or parts[0].upper() != b"PLAIN":
            self._tagged(cmd.tag, "NO", "unsupported authentication mechanism")
            return
        if len(parts) > 1:
            blob = parts[1]
        else:
            self._send(b"+ \r\n")
            line = self.rfile.readline()
            if not line:
                raise OSError("client closed during AUTHENTICATE")
            blob = line.strip()
            if blob == b"*":
                self._tagged(cmd.tag, "BAD", "AUTHENTICATE cancelled")
                return
        try:
            decoded = base64.b64decode(blob, validate=True)
            _authzid, authcid, password = decoded.split(b"\x00")
        except ValueError:
            self._tagged(cmd.tag, "BAD", "malformed AUTHENTICATE response")
            return
        self._handle_login(
            cmd, (authcid.decode("utf-8", "replace"), password.decode("utf-8", "replace"))
        )

    def _handle_login(self, cmd: Command, creds: tuple[str, str] | None) -> None:
        assert creds is not None
        email, password = creds
        try:
            principal = self.server.credstore.authenticate(email, password)
            account = self.server.credstore.get_account(email)
        except (AuthFailed, ChamailError):
            log.info("authentication failed for %r from %s", email, self.peer)
            self._tagged(cmd.tag, "NO", AUTH_FAILED_TEXT)
            return

        target = account.upstream
        override = self.server.config.upstream_overrides.get(account.email)
        host, port, use_tls = (
            (override.host, override.port, override.use_tls)
            if override
            else (target.host, target.port, target.use_tls)
        )
        try:
            upstream_password = store.open_sealed(
                target.sealed_password, self.server.master_key
            ).decode("utf-8")
        except StoreError as exc:
            log.error("cannot unseal upstream credential for %s: %s", account.email, exc)
            self._tagged(cmd.tag, "NO", UPSTREAM_FAILED_TEXT)
            return
        try:
            upstream = UpstreamConnection(host, port, use_tls)
        except UpstreamUnavailable as exc:
            log.warning("upstream connect failed for %s: %s", account.email, exc)
            self._tagged(cmd.tag, "NO", UPSTREAM_FAILED_TEXT)
            return

        login_cmd = Command(
            tag=cmd.tag,
            verb=Verb.LOGIN,
            name="LOGIN",
            login=(target.upstream_login, upstream_password),
        )
        try:
            untagged, tagged_blob = self._exchange_raw(upstream, render_command(login_cmd), cmd.tag)
        except UpstreamUnavailable as exc:
            upstream.close()
            log.warning("upstream login exchange failed for %s: %s", account.email, exc)
            self._tagged(cmd.tag, "NO", UPSTREAM_FAILED_TEXT)
            return
        m = _TAGGED_STATUS_RE.match(tagged_blob)
        if m is None or m.group(2) != b"OK":
            upstream.close()
            log.error("upstream rejected credentials for %s", account.email)
            self._tagged(cmd.tag, "NO", "upstream login failed")
            return

        self.upstream = upstream
        self.upstream_creds = (target.upstream_login, upstream_password)
        self.upstream_target = (host, port, use_tls)
        self.principal = principal
        self.email = account.email
        self.state = _AUTH
        if isinstance(principal, Owner):
            for blob in untagged:
                self._send(blob)
        if cmd.verb is Verb.LOGIN:
            self._send(tagged_blob)
        else:  # AUTHENTICATE: upstream spoke LOGIN, the client did not
            self._tagged(cmd.tag, "OK", completion_text(cmd.name))
        log.info("%s authenticated as %s from %s", account.email, principal, self.peer)

    def _exchange_raw(
        self, upstream: UpstreamConnection, blob: bytes, tag: str
    ) -> tuple[list[bytes], bytes]:
        """Send raw command bytes; collect untagged blobs until *tag* completes."""
        untagged = upstream.send_blob(blob)
        while True:
            reply = upstream.read_blob()
            if _is_tagged_for(reply, tag):
                return untagged, reply
            untagged.append(reply)

    def _handle_logout(self, cmd: Command) -> bool:
        if self.upstream is not None and isinstance(self.principal, Owner):
            try:
                untagged, tagged_blob = self._exchange_raw(self.upstream, cmd.raw, cmd.tag)
                for blob in untagged:
                    self._send(blob)
                self._send(tagged_blob)
            except UpstreamUnavailable:
                self._send(imapcodec.BYE_LINE)
                self._tagged(cmd.tag, "OK", completion_text(cmd.name))
            return False
        if self.upstream is not None:
            try:
                tag = self.upstream.next_tag()
                self._exchange_raw(self.upstream, f"{tag} LOGOUT\r\n".encode(), tag)
            except UpstreamUnavailable:
                pass
        self._send(imapcodec.BYE_LINE)
        self._tagged(cmd.tag, "OK", completion_text(cmd.name))
        return False

    # -- owner: transparent relay -----------------------------------------------

    def _dispatch_owner(self, cmd: Command) -> bool:
        assert self.upstream is not None
        try:
            untagged, tagged_blob = self._exchange_raw(self.upstream, cmd.raw, cmd.tag)
        except UpstreamUnavailable as exc:
            raise SessionAborted(f"upstream lost mid-command: {exc}") from exc
        for blob in untagged:
            self._send(blob)
        self._send(tagged_blob)
        return True

    # -- sub-user: filtered engine -------------------------------------------------

    def _dispatch_subuser(self, cmd: Command) -> bool:
        verb = cmd.verb
        if verb in imapcodec.WRITE_VERBS or verb is Verb.OTHER:
            self._tagged(cmd.tag, "NO", PERMISSION_DENIED_TEXT)
            return True
        if verb in (Verb.LOGIN, Verb.AUTHENTICATE):
            self._tagged(cmd.tag, "BAD", "already authenticated")
            return True
        if verb is Verb.NOOP:
            self._subuser_noop(cmd)
        elif verb in (Verb.SELECT, Verb.EXAMINE):
            self._subuser_select(cmd)
        elif verb is Verb.CLOSE:
            self._subuser_close(cmd)
        elif verb in (Verb.LIST, Verb.LSUB):
            self._subuser_list(cmd)
        elif verb is Verb.STATUS:
            self._subuser_status(cmd)
        elif verb in (Verb.FETCH, Verb.UID_FETCH):
            self._subuser_fetch(cmd)
        elif verb in (Verb.SEARCH, Verb.UID_SEARCH):
            self._subuser_search(cmd)
        else:  # pragma: no cover - verbs above are exhaustive
            self._tagged(cmd.tag, "NO", PERMISSION_DENIED_TEXT)
        return True

    # Internal exchange that interprets stray events against the view.

    def _subuser_exchange(self, blob: bytes, tag: str, on_data=None) -> Tagged:
        assert self.upstream is not None
        strays = self.upstream.send_blob(blob)
        pending = list(strays)
        while True:
            if pending:
                reply = pending.pop(0)
            else:
                reply = self.upstream.read_blob()
            if _is_tagged_for(reply, tag):
                tagged = parse_response(reply)
                assert isinstance(tagged, Tagged)
                return tagged
            try:
                resp = parse_response(reply)
            except ImapSyntaxError as exc:
                raise SessionAborted(f"unparseable upstream response: {exc}") from exc
            if isinstance(resp, Continuation):
                raise SessionAborted("unexpected upstream continuation")
            if on_data is not None and on_data(resp):
                continue
            self._absorb_stray(resp)

    def _absorb_stray(self, resp) -> None:
        """Default handling for unsolicited upstream responses."""
        view = self.view
        if isinstance(resp, ExpungeEvent):
            if view is None:
                return
            try:
                virtual = view.apply_upstream_expunge(resp.seq)
            except UnknownSeq as exc:
                raise SessionAborted(f"upstream expunge desync: {exc}") from exc
            if virtual is not None:
                self._send(b"* %d EXPUNGE\r\n" % virtual)
        elif isinstance(resp, Exists):
            if view is None:
                return
            if resp.count < view.upstream_exists():
                raise SessionAborted("upstream EXISTS shrank without expunge")
            if resp.count > view.upstream_exists():
                self._pending_exists = resp.count
        elif isinstance(resp, Recent):
            pass
        elif isinstance(resp, FetchData):
            if view is None:
                return
            try:
                virtual = view.map_down_seq(resp.seq)
            except UnknownSeq as exc:
                raise SessionAborted(f"upstream fetch desync: {exc}") from exc
            if virtual is not HIDDEN:
                self._send(b"* %d FETCH " % virtual + resp.attrs + CRLF)
        elif isinstance(resp, UntaggedStatus):
            if resp.code == "UIDVALIDITY" and view is not None:
                if resp.code_args.strip() != str(view.uidvalidity):
                    raise SessionAborted("UIDVALIDITY changed mid-session")
        # everything else (FLAGS lists, LIST data, alerts) is dropped:
        # the sub-user engine only forwards what it understands.

    def _flush_pending_exists(self) -> None:
        """Fetch metadata for newly arrived messages and maybe announce them."""
        while self._pending_exists is not None:
            target = self._pending_exists
            self._pending_exists = None
            view = self.view
            if view is None or target <= view.upstream_exists():
                continue
            first = view.upstream_exists() + 1
            decisions = self._fetch_decisions(first, target)
            newcomers = [(seq, uid, decision) for seq, uid, decision, _flags in decisions]
            try:
                announced = view.extend_on_new(newcomers)
            except InconsistentInput as exc:
                raise SessionAborted(f"newcomer desync: {exc}") from exc
            if announced is not None:
                self._send(b"* %d EXISTS\r\n" % announced)

    # -- metadata fetching ---------------------------------------------------------

    def _policy_snapshot(self) -> tuple[PolicySet, dict]:
        assert self.email is not None and isinstance(self.principal, SubUser)
        account = self.server.credstore.get_account(self.email)
        sub = account.subuser(self.principal.name)
        return sub.policy, account.list_members()

    def _fetch_decisions(
        self, first: int, last: int
    ) -> list[tuple[int, int, Decision, frozenset]]:
        """Evaluate policy over upstream seqs first..last.

        Returns (upstream_seq, uid, decision, flags) rows. Any gap or
        parse failure fails the whole operation — a sub-user never sees
        an unfiltered or half-filtered mailbox.
        """
        policy, lists = self.active_policy, self.active_lists
        assert policy is not None and lists is not None
        assert self.upstream is not None
        rows: dict[int, dict] = {}
        tag = self.upstream.next_tag()
        span = f"{first}:{last}" if last > first else str(first)
        request = (
            f"{tag} FETCH {span} (UID FLAGS "
            f"BODY.PEEK[HEADER.FIELDS ({_META_HEADER_FIELDS})])\r\n"
        ).encode("ascii")

        def collect(resp) -> bool:
            if isinstance(resp, FetchData):
                rows[resp.seq] = {"attrs": resp.attrs}
                return True
            return False

        tagged = self._subuser_exchange(request, tag, collect)
        if tagged.status != "OK":
            raise SessionAborted(f"metadata fetch failed: {tagged.status} {tagged.text}")

        parsed: dict[int, dict] = {}
        for seq in range(first, last + 1):
            if seq not in rows:
                raise SessionAborted(f"metadata fetch missing seq {seq}")
            try:
                attrs = dict(parse_fetch_attrs(rows[seq]["attrs"]))
                uid = attrs["UID"]
                header_blob = next(
                    value
                    for key, value in attrs.items()
                    if key.startswith("BODY[HEADER.FIELDS")
                )
                flags_raw = attrs.get("FLAGS", b"()")
                if not isinstance(uid, int) or not isinstance(header_blob, bytes):
                    raise SessionAborted(f"malformed metadata for seq {seq}")
            except (KeyError, StopIteration, ImapSyntaxError) as exc:
                raise SessionAborted(f"malformed metadata for seq {seq}: {exc}") from exc
            if not isinstance(flags_raw, bytes):
                raise SessionAborted(f"malformed FLAGS for seq {seq}")
            flags = frozenset(
                f.decode("ascii", "replace") for f in flags_raw.strip(b"()").split()
            )
            parsed[seq] = {"uid": uid, "header": header_blob, "flags": flags}

        # Body excerpts only for messages whose sender constraints pass and
        # only when keyword constraints exist at all.
        needs_body: list[int] = []
        for seq, row in parsed.items():
            meta = extract_meta(row["header"])
            row["meta"] = meta
            if not sender_constraints_pass(policy, meta.sender, lists):
                row["decision"] = Decision.HIDDEN
            elif policy.has_keyword_constraints:
                needs_body.append(seq)
            else:
                row["decision"] = evaluate(policy, meta, lists, self.principal)

        if needs_body:
            bodies = self._fetch_body_excerpts(needs_body)
            for seq in needs_body:
                row = parsed[seq]
                synthetic = row["header"] + bodies[seq]
                meta = extract_meta(synthetic)
                row["decision"] = evaluate(policy, meta, lists, self.principal)

        return [
            (seq, parsed[seq]["uid"], parsed[seq]["decision"], parsed[seq]["flags"])
            for seq in range(first, last + 1)
        ]

    def _fetch_body_excerpts(self, seqs: list[int]) -> dict[int, bytes]:
        assert self.upstream is not None
        tag = self.upstream.next_tag()
        seq_set = SequenceSet.from_numbers(seqs).render()
        request = (
            f"{tag} FETCH {seq_set} (BODY.PEEK[TEXT]<0.{BODY_EXCERPT_CAP}>)\r\n"
        ).encode("ascii")
        bodies: dict[int, bytes] = {}

        def collect(resp) -> bool:
            if isinstance(resp, FetchData):
                try:
                    attrs = dict(parse_fetch_attrs(resp.attrs))
                    body = next(
                        value for key, value in attrs.items() if key.startswith("BODY[TEXT]")
                    )
                except (StopIteration, ImapSyntaxError) as exc:
                    raise SessionAborted(f"malformed body excerpt: {exc}") from exc
                bodies[resp.seq] = body if isinstance(body, bytes) else b""
                return True
            return False

        tagged = self._subuser_exchange(request, tag, collect)
        if tagged.status != "OK":
            raise SessionAborted(f"body fetch failed: {tagged.status} {tagged.text}")
        missing = [seq for seq in seqs if seq not in bodies]
        if missing:
            raise SessionAborted(f"body fetch missing seqs {missing}")
        return bodies

    # -- sub-user commands ---------------------------------------------------------

    def _subuser_noop(self, cmd: Command) -> None:
        assert self.upstream is not None
        tag = self.upstream.next_tag()
        self._subuser_exchange(f"{tag} NOOP\r\n".encode(), tag)
        self._flush_pending_exists()
        self._tagged(cmd.tag, "OK", completion_text(cmd.name))

    def _examine_and_evaluate(self, mailbox: str):
        """EXAMINE *mailbox* on the main connection and policy-evaluate it.

        Returns (tagged, collected, decisions); decisions is None when the
        upstream refused the mailbox (tagged carries its answer).
        """
        assert self.upstream is not None
        tag = self.upstream.next_tag()
        examine = Command(tag=tag, verb=Verb.EXAMINE, name="EXAMINE", mailbox=mailbox)
        collected: dict = {"exists": None, "uidvalidity": None, "untagged": []}

        def collect(resp) -> bool:
            if isinstance(resp, Exists):
                collected["exists"] = resp.count
                return True
            if isinstance(resp, Recent):
                return True
            if isinstance(resp, RawUntagged) and resp.payload.upper().startswith(b"FLAGS"):
                collected["untagged"].append(("flags", resp.raw))
                return True
            if isinstance(resp, UntaggedStatus):
                if resp.code == "UIDVALIDITY":
                    collected["uidvalidity"] = resp.code_args.strip()
                    collected["untagged"].append(("uidvalidity", resp.raw))
                    return True
                if resp.code == "UIDNEXT":
                    collected["untagged"].append(("uidnext", resp.raw))
                    return True
                return True  # PERMANENTFLAGS, UNSEEN hints, alerts: dropped
            return False

        tagged = self._subuser_exchange(render_command(examine), tag, collect)
        if tagged.status != "OK":
            return tagged, collected, None
        exists = collected["exists"]
        uidvalidity_text = collected["uidvalidity"]
        if exists is None or uidvalidity_text is None or not uidvalidity_text.isdigit():
            raise SessionAborted("upstream EXAMINE response missing EXISTS/UIDVALIDITY")
        collected["uidvalidity"] = int(uidvalidity_text)
        decisions = self._fetch_decisions(1, exists) if exists else []
        return tagged, collected, decisions

    def _subuser_select(self, cmd: Command) -> None:
        assert self.upstream is not None and cmd.mailbox is not None
        policy, lists = self._policy_snapshot()
        self.active_policy, self.active_lists = policy, lists
        # leaving any previously selected mailbox behind
        self.view = None
        self.selected_mailbox = None
        self.state = _AUTH
        self._pending_exists = None

        try:
            tagged, collected, decisions = self._examine_and_evaluate(cmd.mailbox)
        except SessionAborted as exc:
            # fail closed but keep the session: the mailbox simply cannot
            # be opened with filtering guaranteed
            log.warning("sub-user select of %r failed: %s", cmd.mailbox, exc)
            self._tagged(cmd.tag, "NO", "cannot open mailbox with filtering guaranteed")
            return
        if decisions is None:
            self._tagged(cmd.tag, tagged.status, tagged.text.strip() or "SELECT failed")
            return

        view = ViewMap(
            [(seq, uid, decision) for seq, uid, decision, _ in decisions],
            collected["uidvalidity"],
        )
        self.view = view
        self.selected_mailbox = cmd.mailbox
        self.state = _SELECTED

        for kind, raw in collected["untagged"]:
            if kind == "flags":
                self._send(raw)
        self._send(b"* %d EXISTS\r\n" % view.exists())
        self._send(b"* 0 RECENT\r\n")
        for kind, raw in collected["untagged"]:
            if kind in ("uidvalidity", "uidnext"):
                self._send(raw)
        self._tagged(cmd.tag, "OK", f"[READ-ONLY] {completion_text(cmd.name)}")

    def _subuser_close(self, cmd: Command) -> None:
        if self.state != _SELECTED:
            self._tagged(cmd.tag, "NO", imapcodec.NO_MAILBOX_TEXT)
            return
        assert self.upstream is not None
        tag = self.upstream.next_tag()
        self._subuser_exchange(f"{tag} CLOSE\r\n".encode(), tag)
        self.view = None
        self.selected_mailbox = None
        self.state = _AUTH
        self._pending_exists = None
        self._tagged(cmd.tag, "OK", completion_text(cmd.name))

    def _subuser_list(self, cmd: Command) -> None:
        assert self.upstream is not None
        collected: list[bytes] = []

        def collect(resp) -> bool:
            if isinstance(resp, ListData) and resp.name == cmd.name:
                collected.append(resp.raw)
                return True
            return False

        tagged = self._subuser_exchange(
            cmd.tag.encode("ascii") + b" " + cmd.name.encode("ascii") + b" " + cmd.rest + CRLF,
            cmd.tag,
            collect,
        )
        self._flush_pending_exists()
        for raw in collected:
            self._send(raw)
        self._send(tagged.raw)

    def _subuser_status(self, cmd: Command) -> None:
        assert self.upstream is not None and cmd.mailbox is not None
        items_raw = cmd.rest.strip()
        if not items_raw.startswith(b"(") or not items_raw.endswith(b")"):
            self._tagged(cmd.tag, "BAD", "STATUS items must be parenthesized")
            return
        requested = [item.decode("ascii").upper() for item in items_raw[1:-1].split()]
        if not requested:
            self._tagged(cmd.tag, "BAD", "no STATUS items")
            return
        known = {"MESSAGES", "RECENT", "UNSEEN", "UIDNEXT", "UIDVALIDITY"}
        unknown = [item for item in requested if item not in known]
        if unknown:
            self._tagged(cmd.tag, "BAD", f"unknown STATUS item {unknown[0]}")
            return

        # Passthrough values come from a real upstream STATUS.
        tag = self.upstream.next_tag()
        passthrough: dict[str, int] = {}

        def collect(resp) -> bool:
            if isinstance(resp, StatusData):
                passthrough.update(dict(resp.items))
                return True
            return False

        status_cmd = Command(
            tag=tag,
            verb=Verb.STATUS,
            name="STATUS",
            mailbox=cmd.mailbox,
            rest=b"(UIDNEXT UIDVALIDITY)",
        )
        tagged = self._subuser_exchange(render_command(status_cmd), tag, collect)
        self._flush_pending_exists()
        if tagged.status != "OK":
            self._tagged(cmd.tag, tagged.status, tagged.text.strip() or "STATUS failed")
            return

        values: dict[str, int] = {
            "RECENT": 0,
            "UIDNEXT": passthrough.get("UIDNEXT", 0),
            "UIDVALIDITY": passthrough.get("UIDVALIDITY", 0),
        }
        if "MESSAGES" in requested or "UNSEEN" in requested:
            visible = self._count_visible(cmd.mailbox)
            if visible is None:
                self._tagged(cmd.tag, "NO", "cannot inspect mailbox with filtering guaranteed")
                return
            values["MESSAGES"] = len(visible)
            values["UNSEEN"] = sum(1 for _, _, flags in visible if "\\Seen" not in flags)

        rendered = " ".join(f"{item} {values[item]}" for item in requested)
        self._send(
            b"* STATUS "
            + imapcodec.render_astring(cmd.mailbox)
            + f" ({rendered})".encode("ascii")
            + CRLF
        )
        self._tagged(cmd.tag, "OK", completion_text(cmd.name))

    def _count_visible(self, target: str) -> list[tuple[int, int, frozenset]] | None:
        """Policy-evaluate *target* over the main upstream connection.

        The upstream holds one selection per connection, so this EXAMINEs
        the target in place and afterwards re-opens and resyncs whatever
        mailbox the session had selected. Returns (seq, uid, flags) of the
        target's visible messages, or None if the target cannot be
        inspected (the session itself stays coherent). Raises
        SessionAborted when the selected mailbox cannot be restored.
        """
        assert self.upstream is not None
        if self.active_policy is None or self.active_lists is None:
            # no selection has pinned a snapshot yet
            self.active_policy, self.active_lists = self._policy_snapshot()
        old_view = self.view
        old_mailbox = self.selected_mailbox
        was_selected = self.state == _SELECTED and old_view is not None
        same = was_selected and _same_mailbox(target, old_mailbox)

        # Quiesce event handling: strays during the detour belong to the
        # target mailbox and must not touch the session's view.
        self.view = None
        self._pending_exists = None

        result: list[tuple[int, int, frozenset]] | None = None
        decisions = None
        collected: dict = {}
        try:
            tagged, collected, decisions = self._examine_and_evaluate(target)
        except SessionAborted as exc:
            if not was_selected:
                raise
            log.warning("STATUS inspection of %r failed: %s", target, exc)
        if decisions is not None:
            result = [
                (seq, uid, flags)
                for seq, uid, decision, flags in decisions
                if decision is Decision.VISIBLE
            ]

        if was_selected:
            assert old_view is not None and old_mailbox is not None
            if same and decisions is not None:
                fresh, uidvalidity = decisions, collected["uidvalidity"]
            else:
                _tagged2, collected2, fresh = self._examine_and_evaluate(old_mailbox)
                if fresh is None:
                    raise SessionAborted("cannot re-open selected mailbox after STATUS")
                uidvalidity = collected2["uidvalidity"]
            self._reconcile_view(old_view, uidvalidity, fresh)
        elif decisions is not None:
            # Return the upstream to an unselected state. CLOSE after
            # EXAMINE expunges nothing.
            tag = self.upstream.next_tag()
            self._subuser_exchange(f"{tag} CLOSE\r\n".encode("ascii"), tag)
        return result

    def _reconcile_view(self, old_view: ViewMap, uidvalidity: int, decisions) -> None:
        """Replace the session view with freshly fetched state, announcing
        the difference (expunges of vanished messages, then a new EXISTS)
        so the client's model stays consistent."""
        if uidvalidity != old_view.uidvalidity:
            raise SessionAborted("UIDVALIDITY changed mid-session")
        new_view = ViewMap(
            [(seq, uid, decision) for seq, uid, decision, _ in decisions], uidvalidity
        )
        new_uids = set(new_view.visible_uids())
        vanished = [
            virtual
            for virtual, uid in enumerate(old_view.visible_uids(), start=1)
            if uid not in new_uids
        ]
        for virtual in reversed(vanished):
            self._send(b"* %d EXPUNGE\r\n" % virtual)
        if new_view.exists() != old_view.exists() - len(vanished):
            self._send(b"* %d EXISTS\r\n" % new_view.exists())
        self.view = new_view
        self.state = _SELECTED

    def _subuser_fetch(self, cmd: Command) -> None:
        if self.state != _SELECTED or self.view is None:
            self._tagged(cmd.tag, "NO", imapcodec.NO_MAILBOX_TEXT)
            return
        assert self.upstream is not None and cmd.seq_set is not None
        view = self.view

        if cmd.verb is Verb.FETCH:
            mapped = view.map_up(cmd.seq_set)
            if not mapped.ranges:
                self._tagged(cmd.tag, "BAD", "invalid sequence set")
                return
            upstream_blob = (
                f"{cmd.tag} FETCH {mapped.render()} ".encode("ascii") + cmd.rest + CRLF
            )
        else:
            visible = view.visible_uids()
            max_uid = visible[-1] if visible else 0
            wanted = [
                uid for uid in visible if _uid_in_requested(uid, cmd.seq_set, max_uid)
            ]
            if not wanted:
                self._tagged(cmd.tag, "OK", completion_text(cmd.name))
                return
            uid_set = SequenceSet.from_numbers(wanted)
            upstream_blob = (
                f"{cmd.tag} UID FETCH {uid_set.render()} ".encode("ascii") + cmd.rest + CRLF
            )

        allowed_uids = set(view.visible_uids())

        def relay(resp) -> bool:
            if not isinstance(resp, FetchData):
                return False
            try:
                virtual = view.map_down_seq(resp.seq)
            except UnknownSeq as exc:
                raise SessionAborted(f"fetch response desync: {exc}") from exc
            if virtual is HIDDEN:
                return True
            if cmd.verb is Verb.UID_FETCH:
                try:
                    attrs = dict(parse_fetch_attrs(resp.attrs))
                except ImapSyntaxError as exc:
                    raise SessionAborted(f"unparseable FETCH attributes: {exc}") from exc
                uid = attrs.get("UID")
                if not isinstance(uid, int) or uid not in allowed_uids:
                    return True
            self._send(b"* %d FETCH " % virtual + resp.attrs + CRLF)
            return True

        tagged = self._subuser_exchange(upstream_blob, cmd.tag, relay)
        self._flush_pending_exists()
        self._send(tagged.raw)

    def _subuser_search(self, cmd: Command) -> None:
        if self.state != _SELECTED or self.view is None:
            self._tagged(cmd.tag, "NO", imapcodec.NO_MAILBOX_TEXT)
            return
        assert self.upstream is not None
        view = self.view
        upstream_blob = (
            cmd.tag.encode("ascii") + b" " + cmd.name.encode("ascii") + b" " + cmd.rest + CRLF
        )
        hits: list[int] = []

        def collect(resp) -> bool:
            if isinstance(resp, SearchData):
                hits.extend(resp.numbers)
                return True
            return False

        tagged = self._subuser_exchange(upstream_blob, cmd.tag, collect)
        self._flush_pending_exists()
        if tagged.status != "OK":
            self._tagged(cmd.tag, tagged.status, tagged.text.strip() or "SEARCH failed")
            return
        if cmd.verb is Verb.UID_SEARCH:
            mapped = view.filter_uids(hits)
        else:
            mapped = []
            for seq in hits:
                try:
                    virtual = view.map_down_seq(seq)
                except UnknownSeq as exc:
                    raise SessionAborted(f"search result desync: {exc}") from exc
                if virtual is not HIDDEN:
                    mapped.append(virtual)
        self._send(imapcodec.render_response(SearchData(tuple(mapped))))
        self._send(tagged.raw)


def _uid_in_requested(uid: int, seq_set: SequenceSet, max_visible_uid: int) -> bool:
    """UID-set membership where '*' resolves to the largest *visible* uid."""
    for lo, hi in seq_set.ranges:
        a = max_visible_uid if lo is None else lo
        b = max_visible_uid if hi is None else hi
        if min(a, b) <= uid <= max(a, b):
            return True
    return False


# -- the listener --------------------------------------------------------------------


class ProxyServer:
    def __init__(self, config: ProxyConfig, credstore: CredStore, master_key: bytes):
        self.config = config
        self.credstore = credstore
        self.master_key = master_key
        self._sock = socket.create_server((config.listen_host, config.listen_port))
        self._sock.settimeout(0.2)
        self.host, self.port = self._sock.getsockname()[:2]
        self._ssl_context: ssl.SSLContext | None = None
        if config.tls_certfile:
            context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            context.load_cert_chain(config.tls_certfile, config.tls_keyfile)
            self._ssl_context = context
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._sessions: list[threading.Thread] = []

    def start(self) -> "ProxyServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        log.info("listening on %s:%d", self.host, self.port)
        while not self._stop.is_set():
            try:
                conn, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            if self._ssl_context is not None:
                try:
                    conn = self._ssl_context.wrap_socket(conn, server_side=True)
                except ssl.SSLError as exc:
                    log.warning("TLS handshake failed from %s: %s", addr, exc)
                    conn.close()
                    continue
            session = ClientSession(self, conn, f"{addr[0]}:{addr[1]}")
            thread = threading.Thread(target=session.run, daemon=True)
            thread.start()
            self._sessions.append(thread)
            self._sessions = [t for t in self._sessions if t.is_alive()]

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._sock.close()
        for thread in self._sessions:
            thread.join(timeout=2)

    def __enter__(self) -> "ProxyServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
