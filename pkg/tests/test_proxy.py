"""Proxy behavior: owner passthrough, sub-user filtering, fail-closed paths."""

import base64
import json
import socket

import pytest

from conftest import (
    ACCOUNT,
    FAST_KDF,
    OWNER_PASSWORD,
    SPOUSE_PASSWORD,
    UPSTREAM_PASSWORD,
    ImapClient,
    make_household_store,
)
from chamail.credstore import CredStore, UpstreamSpec
from chamail.errors import ConfigError
from chamail.mockimap import FixtureMailbox, MockIMAPServer, StoredMessage
from chamail.proxy import ProxyConfig, ProxyServer, UpstreamOverride, load_config


# -- configuration ------------------------------------------------------------


def test_config_from_json_full():
    config = ProxyConfig.from_json(
        {
            "store": "/var/lib/chamail/store.json",
            "listen": {"host": "0.0.0.0", "port": 993},
            "tls": {"certfile": "/etc/c.pem", "keyfile": "/etc/k.pem"},
            "upstream_overrides": {
                "Person@Gmail.com": {"host": "10.0.0.1", "port": 143}
            },
        }
    )
    assert config.store_path == "/var/lib/chamail/store.json"
    assert (config.listen_host, config.listen_port) == ("0.0.0.0", 993)
    assert config.tls_certfile == "/etc/c.pem"
    assert config.upstream_overrides["person@gmail.com"] == UpstreamOverride(
        "10.0.0.1", 143, False
    )


def test_config_defaults():
    config = ProxyConfig.from_json({"store": "s.json"})
    assert (config.listen_host, config.listen_port) == ("127.0.0.1", 1143)
    assert config.tls_certfile is None
    assert config.upstream_overrides == {}


@pytest.mark.parametrize(
    "obj",
    [
        [],
        {},
        {"store": 7},
        {"store": "s", "listen": {"port": 0}},
        {"store": "s", "listen": {"port": "many"}},
        {"store": "s", "tls": {"certfile": "c"}},
        {"store": "s", "upstream_overrides": {"a@b.example": {"host": "h"}}},
    ],
)
def test_config_rejects(obj):
    with pytest.raises(ConfigError):
        ProxyConfig.from_json(obj)


def test_load_config_file(tmp_path):
    path = tmp_path / "proxy.json"
    path.write_text(json.dumps({"store": "s.json", "listen": {"port": 2143}}))
    assert load_config(path).listen_port == 2143
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


# -- authentication -----------------------------------------------------------


def test_owner_login(connect):
    client = connect()
    assert client.greeting == b"* OK IMAP4rev1 service ready\r\n"
    out = client.cmd(b"t1 LOGIN person@gmail.com appleball\r\n")
    assert out[-1] == b"t1 OK LOGIN completed\r\n"


def test_wrong_password_and_unknown_account_read_the_same(connect):
    client = connect()
    wrong = client.cmd(b"t1 LOGIN person@gmail.com nope12345\r\n")[-1]
    unknown = client.cmd(b"t2 LOGIN stranger@gmail.com appleball\r\n")[-1]
    assert wrong == b"t1 NO LOGIN failed\r\n"
    assert unknown.split(b" ", 1)[1] == wrong.split(b" ", 1)[1]


def test_authenticate_plain(connect):
    client = connect()
    blob = base64.b64encode(
        b"\x00" + ACCOUNT.encode() + b"\x00" + SPOUSE_PASSWORD.encode()
    )
    out = client.cmd(b"t1 AUTHENTICATE PLAIN " + blob + b"\r\n")
    assert out[-1] == b"t1 OK AUTHENTICATE completed\r\n"
    out = client.cmd(b"t2 SELECT INBOX\r\n")  # lands in the filtered view
    assert b"* 4 EXISTS\r\n" in out


def test_authenticate_cancel(connect):
    client = connect()
    client.send(b"t1 AUTHENTICATE PLAIN\r\n")
    assert client._read() == b"+ \r\n"
    client.send(b"*\r\n")
    assert client._read() == b"t1 BAD AUTHENTICATE cancelled\r\n"


def test_commands_rejected_before_auth(connect):
    client = connect()
    assert client.cmd(b"t1 SELECT INBOX\r\n")[-1] == b"t1 NO not authenticated\r\n"
    assert client.cmd(b"t2 FETCH 1 (UID)\r\n")[-1] == b"t2 NO not authenticated\r\n"
    assert client.cmd(b"t3 NOOP\r\n")[-1] == b"t3 OK NOOP completed\r\n"


def test_capability_answered_by_proxy(connect, mock6):
    client = connect()
    out = client.cmd(b"t1 CAPABILITY\r\n")
    assert out[0] == b"* CAPABILITY IMAP4rev1 AUTH=PLAIN\r\n"
    client.cmd(b"t2 LOGIN person@gmail.com appleball\r\n")
    mock6.clear_log()
    client.cmd(b"t3 CAPABILITY\r\n")
    assert "CAPABILITY" not in mock6.received_verbs()


def test_syntax_error_keeps_session(connect):
    client = connect()
    out = client.cmd(b"t1 LOGIN onlyone\r\n")
    assert out[-1].startswith(b"t1 BAD")
    assert client.cmd(b"t2 NOOP\r\n")[-1] == b"t2 OK NOOP completed\r\n"


def test_oversized_literal_closes_session(connect):
    client = connect()
    out = client.cmd(b"t1 LOGIN person@gmail.com {2000000}\r\n")
    assert out[-1] == b"t1 BAD literal too large\r\n"
    assert client._read() == b""


def _dead_port() -> int:
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    return port


def test_upstream_unreachable(tmp_path, master_key):
    cs = make_household_store(tmp_path / "store.json", _dead_port(), master_key)
    config = ProxyConfig(store_path=cs.path, listen_port=0)
    with ProxyServer(config, cs, master_key) as proxy:
        client = ImapClient(proxy.port)
        out = client.cmd(b"t1 LOGIN person@gmail.com appleball\r\n")
        assert out[-1] == b"t1 NO upstream unavailable\r\n"
        client.close()


def test_upstream_rejects_stored_credential(tmp_path, master_key, mock6):
    cs = CredStore(str(tmp_path / "store.json"), kdf_params=FAST_KDF)
    cs.create_account(
        ACCOUNT,
        UpstreamSpec(
            host="127.0.0.1",
            port=mock6.port,
            password="not-the-upstream-pw",
            upstream_login=ACCOUNT,
        ),
        OWNER_PASSWORD,
        master_key,
    )
    config = ProxyConfig(store_path=cs.path, listen_port=0)
    with ProxyServer(config, cs, master_key) as proxy:
        client = ImapClient(proxy.port)
        out = client.cmd(b"t1 LOGIN person@gmail.com appleball\r\n")
        assert out[-1] == b"t1 NO upstream login failed\r\n"
        client.close()


# -- owner passthrough -----------------------------------------------------------


def test_owner_sees_everything(owner_session):
    out = owner_session.cmd(b"t2 SELECT INBOX\r\n")
    assert b"* 6 EXISTS\r\n" in out
    assert out[-1] == b"t2 OK [READ-WRITE] SELECT completed\r\n"
    out = owner_session.cmd(b"t3 SEARCH FROM ex@gmail.com\r\n")
    assert out[0] == b"* SEARCH 3 5\r\n"
    out = owner_session.cmd(b"t4 FETCH 3 (UID)\r\n")
    assert out[0] == b"* 3 FETCH (UID 30)\r\n"


def test_owner_can_write(owner_session, mock6):
    owner_session.cmd(b"t2 SELECT INBOX\r\n")
    out = owner_session.cmd(b"t3 STORE 6 +FLAGS (\\Seen)\r\n")
    assert out[0] == b"* 6 FETCH (FLAGS (\\Seen))\r\n"
    assert mock6.mailboxes["INBOX"].messages[5].has_flag("\\Seen")


def test_owner_unknown_verb_is_relayed(owner_session, mock6):
    owner_session.cmd(b"t2 SELECT INBOX\r\n")
    mock6.clear_log()
    out = owner_session.cmd(b"t3 XAPPLEPUSH ping\r\n")
    assert out[-1] == b"t3 BAD unsupported command\r\n"
    assert mock6.received_verbs() == ["XAPPLEPUSH"]


def test_owner_logout_relays_bye(owner_session, mock6):
    out = owner_session.cmd(b"t9 LOGOUT\r\n")
    assert out[0] == b"* BYE IMAP4rev1 server logging out\r\n"
    assert out[-1] == b"t9 OK LOGOUT completed\r\n"
    assert mock6.received_verbs()[-1] == "LOGOUT"


# -- sub-user filtering ------------------------------------------------------------


def test_subuser_select_is_filtered_and_read_only(spouse_session, mock6):
    mock6.clear_log()
    out = spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    assert b"* 4 EXISTS\r\n" in out
    assert b"* 0 RECENT\r\n" in out
    assert b"* OK [UIDVALIDITY 4242] UIDs valid\r\n" in out
    assert b"* OK [UIDNEXT 61] Predicted next UID\r\n" in out
    assert out[-1] == b"t2 OK [READ-ONLY] SELECT completed\r\n"
    verbs = mock6.received_verbs()
    assert "EXAMINE" in verbs and "SELECT" not in verbs


def test_subuser_examine(spouse_session):
    out = spouse_session.cmd(b"t2 EXAMINE INBOX\r\n")
    assert b"* 4 EXISTS\r\n" in out
    assert out[-1] == b"t2 OK [READ-ONLY] EXAMINE completed\r\n"


def test_subuser_select_unknown_mailbox(spouse_session):
    out = spouse_session.cmd(b"t2 SELECT Nope\r\n")
    assert out[-1] == b"t2 NO No such mailbox\r\n"
    # session still usable
    out = spouse_session.cmd(b"t3 SELECT INBOX\r\n")
    assert b"* 4 EXISTS\r\n" in out


def test_subuser_fetch_renumbers(spouse_session):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    out = spouse_session.cmd(b"t3 FETCH 1:* (UID)\r\n")
    assert out[:-1] == [
        b"* 1 FETCH (UID 10)\r\n",
        b"* 2 FETCH (UID 20)\r\n",
        b"* 3 FETCH (UID 40)\r\n",
        b"* 4 FETCH (UID 60)\r\n",
    ]


def test_subuser_fetch_maps_content(spouse_session):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    out = spouse_session.cmd(b"t3 FETCH 3 (BODY.PEEK[HEADER.FIELDS (FROM)])\r\n")
    assert out[0].startswith(b"* 3 FETCH ")
    assert b"newsletter@shop.example" in out[0]  # upstream message four


def test_subuser_fetch_out_of_range_is_bad(spouse_session):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    out = spouse_session.cmd(b"t3 FETCH 9 (UID)\r\n")
    assert out == [b"t3 BAD invalid sequence set\r\n"]


def test_subuser_uid_fetch_hidden_uid_yields_nothing(spouse_session):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    out = spouse_session.cmd(b"t3 UID FETCH 30 (FLAGS)\r\n")
    assert out == [b"t3 OK UID FETCH completed\r\n"]
    out = spouse_session.cmd(b"t4 UID FETCH 30:50 (FLAGS)\r\n")
    assert out[:-1] == [b"* 3 FETCH (FLAGS () UID 40)\r\n"]


def test_subuser_uid_fetch_star_is_largest_visible(spouse_session):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    out = spouse_session.cmd(b"t3 UID FETCH *:* (FLAGS)\r\n")
    assert out[:-1] == [b"* 4 FETCH (FLAGS () UID 60)\r\n"]


def test_subuser_search_maps_sequences(spouse_session):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    assert spouse_session.cmd(b"t3 SEARCH ALL\r\n")[0] == b"* SEARCH 1 2 3 4\r\n"
    assert spouse_session.cmd(b"t4 SEARCH FROM ex@gmail.com\r\n")[0] == b"* SEARCH\r\n"
    assert (
        spouse_session.cmd(b"t5 UID SEARCH ALL\r\n")[0] == b"* SEARCH 10 20 40 60\r\n"
    )
    assert (
        spouse_session.cmd(b"t6 UID SEARCH FROM ex@gmail.com\r\n")[0] == b"* SEARCH\r\n"
    )


def test_subuser_fetch_requires_selection(spouse_session):
    out = spouse_session.cmd(b"t2 FETCH 1 (UID)\r\n")
    assert out == [b"t2 NO no mailbox selected\r\n"]


def test_subuser_close(spouse_session, mock6):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    mock6.clear_log()
    out = spouse_session.cmd(b"t3 CLOSE\r\n")
    assert out == [b"t3 OK CLOSE completed\r\n"]
    assert mock6.received_verbs() == ["CLOSE"]
    out = spouse_session.cmd(b"t4 FETCH 1 (UID)\r\n")
    assert out == [b"t4 NO no mailbox selected\r\n"]
    out = spouse_session.cmd(b"t5 CLOSE\r\n")
    assert out == [b"t5 NO no mailbox selected\r\n"]


def test_subuser_list_passthrough(spouse_session):
    out = spouse_session.cmd(b't2 LIST "" *\r\n')
    assert out[0] == b'* LIST () "/" INBOX\r\n'
    assert out[-1] == b"t2 OK LIST completed\r\n"


def test_subuser_relogin_rejected(spouse_session):
    out = spouse_session.cmd(b"t2 LOGIN person@gmail.com catsanddogs\r\n")
    assert out == [b"t2 BAD already authenticated\r\n"]


def test_subuser_logout(spouse_session, mock6):
    out = spouse_session.cmd(b"t9 LOGOUT\r\n")
    assert out[0] == b"* BYE IMAP4rev1 server logging out\r\n"
    assert out[-1] == b"t9 OK LOGOUT completed\r\n"
    assert mock6.received_verbs()[-1] == "LOGOUT"


# -- write isolation ---------------------------------------------------------------


MUTATING = [
    b"STORE 1 +FLAGS (\\Deleted)",
    b"UID STORE 10 +FLAGS (\\Deleted)",
    b"EXPUNGE",
    b"COPY 1 Archive",
    b"UID COPY 10 Archive",
    b"CREATE Evil",
    b"DELETE INBOX",
    b"RENAME INBOX Elsewhere",
    b"SUBSCRIBE INBOX",
    b"XAPPLEPUSH ping",
]


@pytest.mark.parametrize("line", MUTATING, ids=lambda b: b.split()[0].decode())
def test_subuser_writes_denied(spouse_session, mock6, line):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    mock6.clear_log()
    out = spouse_session.cmd(b"t3 " + line + b"\r\n")
    assert out == [b"t3 NO Permission denied\r\n"]
    assert mock6.received_verbs() == []


def test_subuser_append_denied_even_with_literal(spouse_session, mock6):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    mock6.clear_log()
    body = b"From: sneaky@x.example\r\n\r\nhi\r\n"
    out = spouse_session.cmd(
        b"t3 APPEND INBOX (\\Seen) {%d+}\r\n" % len(body) + body + b"\r\n"
    )
    assert out == [b"t3 NO Permission denied\r\n"]
    assert mock6.received_verbs() == []
    assert mock6.mailboxes["INBOX"].exists() == 6


# -- live mailbox updates -----------------------------------------------------------


def test_hidden_arrival_is_silent(spouse_session, mock6):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    mock6.inject_new_message(
        "INBOX", b"From: ex@gmail.com\r\nSubject: POPPY2266\r\n\r\nPOPPYBODY2266\r\n"
    )
    out = spouse_session.cmd(b"t3 NOOP\r\n")
    assert out == [b"t3 OK NOOP completed\r\n"]
    # and it stays invisible afterwards
    out = spouse_session.cmd(b"t4 FETCH 1:* (UID)\r\n")
    assert len(out) == 5


def test_visible_arrival_announced(spouse_session, mock6):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    uid = mock6.inject_new_message(
        "INBOX", b"From: colleague@work.example\r\nSubject: standup\r\n\r\nmoved\r\n"
    )
    out = spouse_session.cmd(b"t3 NOOP\r\n")
    assert out == [b"* 5 EXISTS\r\n", b"t3 OK NOOP completed\r\n"]
    out = spouse_session.cmd(b"t4 FETCH 5 (UID)\r\n")
    assert out[0] == b"* 5 FETCH (UID %d)\r\n" % uid


def test_hidden_expunge_is_silent(spouse_session, mock6):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    mock6.inject_expunge("INBOX", 30)
    out = spouse_session.cmd(b"t3 NOOP\r\n")
    assert out == [b"t3 OK NOOP completed\r\n"]
    out = spouse_session.cmd(b"t4 SEARCH ALL\r\n")
    assert out[0] == b"* SEARCH 1 2 3 4\r\n"


def test_visible_expunge_renumbered(spouse_session, mock6):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    mock6.inject_expunge("INBOX", 20)
    out = spouse_session.cmd(b"t3 NOOP\r\n")
    assert out == [b"* 2 EXPUNGE\r\n", b"t3 OK NOOP completed\r\n"]
    out = spouse_session.cmd(b"t4 FETCH 1:* (UID)\r\n")
    assert out[:-1] == [
        b"* 1 FETCH (UID 10)\r\n",
        b"* 2 FETCH (UID 40)\r\n",
        b"* 3 FETCH (UID 60)\r\n",
    ]


def test_upstream_drop_terminates_session(spouse_session, mock6):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    mock6.drop_connection()
    spouse_session.send(b"t3 NOOP\r\n")
    assert spouse_session._read() == b"* BYE session terminated\r\n"
    assert spouse_session._read() == b""


# -- STATUS -----------------------------------------------------------------------


def test_status_passthrough_items_skip_inspection(spouse_session, mock6):
    mock6.clear_log()
    out = spouse_session.cmd(b"t2 STATUS INBOX (UIDNEXT UIDVALIDITY)\r\n")
    assert out[0] == b"* STATUS INBOX (UIDNEXT 61 UIDVALIDITY 4242)\r\n"
    assert out[-1] == b"t2 OK STATUS completed\r\n"
    assert mock6.received_verbs() == ["STATUS"]


def test_status_counts_only_visible(spouse_session, mock6):
    mock6.clear_log()
    out = spouse_session.cmd(b"t2 STATUS INBOX (MESSAGES UNSEEN RECENT)\r\n")
    assert out[0] == b"* STATUS INBOX (MESSAGES 4 UNSEEN 3 RECENT 0)\r\n"
    # inspection runs over the one upstream connection and closes after
    assert mock6.received_verbs() == ["STATUS", "EXAMINE", "FETCH", "CLOSE"]


def test_status_while_same_mailbox_selected(spouse_session, mock6):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    mock6.clear_log()
    out = spouse_session.cmd(b"t3 STATUS INBOX (MESSAGES)\r\n")
    assert out == [
        b"* STATUS INBOX (MESSAGES 4)\r\n",
        b"t3 OK STATUS completed\r\n",
    ]
    assert mock6.received_verbs() == ["STATUS", "EXAMINE", "FETCH"]
    # the selection survived the detour
    out = spouse_session.cmd(b"t4 FETCH 4 (UID)\r\n")
    assert out[0] == b"* 4 FETCH (UID 60)\r\n"


def test_status_reflects_concurrent_expunge(spouse_session, mock6):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    mock6.inject_expunge("INBOX", 20)
    out = spouse_session.cmd(b"t3 STATUS INBOX (MESSAGES)\r\n")
    assert out == [
        b"* 2 EXPUNGE\r\n",
        b"* STATUS INBOX (MESSAGES 3)\r\n",
        b"t3 OK STATUS completed\r\n",
    ]
    out = spouse_session.cmd(b"t4 SEARCH ALL\r\n")
    assert out[0] == b"* SEARCH 1 2 3\r\n"


def test_status_unknown_item_rejected(spouse_session):
    out = spouse_session.cmd(b"t2 STATUS INBOX (HIGHESTMODSEQ)\r\n")
    assert out == [b"t2 BAD unknown STATUS item HIGHESTMODSEQ\r\n"]


def test_status_unknown_mailbox(spouse_session):
    out = spouse_session.cmd(b"t2 STATUS Nope (MESSAGES)\r\n")
    assert out[-1] == b"t2 NO No such mailbox\r\n"


ARCHIVE_VISIBLE = b"From: friend@uni.example\r\nSubject: photos\r\n\r\nattached\r\n"
ARCHIVE_HIDDEN = b"From: ex@gmail.com\r\nSubject: LILAC7733\r\n\r\nLILACBODY7733\r\n"


@pytest.fixture
def two_box(tmp_path, master_key, inbox6):
    archive = FixtureMailbox(
        "Archive",
        [
            StoredMessage(100, (), ARCHIVE_HIDDEN),
            StoredMessage(110, (), ARCHIVE_VISIBLE),
        ],
        uidvalidity=7,
        uidnext=200,
    )
    with MockIMAPServer([inbox6, archive], {ACCOUNT: UPSTREAM_PASSWORD}) as mock:
        cs = make_household_store(tmp_path / "store.json", mock.port, master_key)
        config = ProxyConfig(store_path=cs.path, listen_port=0)
        with ProxyServer(config, cs, master_key) as proxy:
            yield mock, proxy


def test_status_of_other_mailbox_while_selected(two_box):
    mock, proxy = two_box
    client = ImapClient(proxy.port)
    try:
        client.cmd(b"t1 LOGIN person@gmail.com catsanddogs\r\n")
        client.cmd(b"t2 SELECT INBOX\r\n")
        mock.clear_log()
        out = client.cmd(b"t3 STATUS Archive (MESSAGES UNSEEN)\r\n")
        assert out == [
            b"* STATUS Archive (MESSAGES 1 UNSEEN 1)\r\n",
            b"t3 OK STATUS completed\r\n",
        ]
        # inspect target, then re-open the selected mailbox
        assert mock.received_verbs() == [
            "STATUS",
            "EXAMINE",
            "FETCH",
            "EXAMINE",
            "FETCH",
        ]
        out = client.cmd(b"t4 FETCH 1:* (UID)\r\n")
        assert len(out) == 5  # four visible messages, one tagged line
    finally:
        client.close()


def test_subuser_can_select_second_mailbox(two_box):
    mock, proxy = two_box
    client = ImapClient(proxy.port)
    try:
        client.cmd(b"t1 LOGIN person@gmail.com catsanddogs\r\n")
        out = client.cmd(b"t2 SELECT Archive\r\n")
        assert b"* 1 EXISTS\r\n" in out
        out = client.cmd(b"t3 FETCH 1 (UID)\r\n")
        assert out[0] == b"* 1 FETCH (UID 110)\r\n"
        out = client.cmd(b"t4 UID SEARCH ALL\r\n")
        assert out[0] == b"* SEARCH 110\r\n"
    finally:
        client.close()


# -- policy lifecycle ---------------------------------------------------------------


def test_policy_snapshot_held_until_reselect(spouse_session, store6):
    spouse_session.cmd(b"t2 SELECT INBOX\r\n")
    store6.manage_list(ACCOUNT, "remove-member", "exes", "ex@gmail.com")
    # mid-selection the snapshot still hides the old matches
    out = spouse_session.cmd(b"t3 FETCH 1:* (UID)\r\n")
    assert len(out) == 5
    # a fresh SELECT re-reads the policy
    out = spouse_session.cmd(b"t4 SELECT INBOX\r\n")
    assert b"* 6 EXISTS\r\n" in out
