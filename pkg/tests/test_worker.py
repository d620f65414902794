from datetime import timedelta, timezone, datetime

import pytest

from feedmix.feedsim import (
    FaultKind,
    FaultSpec,
    FeedGenerator,
    SimScenario,
    render_atom,
    render_rss2,
)
from feedmix.model import ChannelKind, StreamStatus
from feedmix.worker import (
    ChannelFetchers,
    FailureReason,
    FeedFormat,
    FetchKind,
    ParseError,
    ParseErrorKind,
    channel_url,
    fetch_conditional,
    parse_feed,
    process_message,
)

from support import make_item, make_msg, make_stream


class TestFetchConditional:
    def test_unconditional_get_captures_validators(self, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, rng_seed=1))
        r = fetch_conditional(f"{srv.base_url}/feeds/0", timeout=5)
        assert r.kind is FetchKind.MODIFIED
        assert r.status_code == 200
        assert r.etag
        assert r.last_modified
        assert r.hops == 0
        assert not r.redirected
        assert len(r.body) > 0

    def test_matching_etag_not_modified_zero_body(self, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, duplicate_fraction=1.0, rng_seed=1))
        first = fetch_conditional(f"{srv.base_url}/feeds/0", timeout=5)
        second = fetch_conditional(f"{srv.base_url}/feeds/0", etag=first.etag, timeout=5)
        assert second.kind is FetchKind.NOT_MODIFIED
        assert second.body == b""
        assert srv.request_log[-1].body_bytes == 0

    def test_redirect_chain_reported_permanent(self, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, redirect_hops=2, rng_seed=1))
        r = fetch_conditional(f"{srv.base_url}/feeds/0", timeout=5)
        assert r.kind is FetchKind.MODIFIED
        assert r.hops == 2
        assert r.redirected
        assert r.permanent_redirect
        assert r.final_url.endswith("/feeds/0/hop/2")

    def test_six_hops_fails(self, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, redirect_hops=6, rng_seed=1))
        r = fetch_conditional(f"{srv.base_url}/feeds/0", timeout=5)
        assert r.kind is FetchKind.FAILED
        assert r.failure is FailureReason.TOO_MANY_REDIRECTS
        assert r.hops == 5

    def test_http_500(self, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, fault=FaultSpec(FaultKind.HTTP_500, 1.0)))
        r = fetch_conditional(f"{srv.base_url}/feeds/0", timeout=5)
        assert r.failure is FailureReason.HTTP_5XX

    def test_http_404(self, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1))
        r = fetch_conditional(f"{srv.base_url}/feeds/7", timeout=5)
        assert r.failure is FailureReason.HTTP_4XX

    def test_timeout(self, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, fault=FaultSpec(FaultKind.TIMEOUT, 1.0)), fault_hold_s=2.0)
        r = fetch_conditional(f"{srv.base_url}/feeds/0", timeout=0.3)
        assert r.failure is FailureReason.TIMEOUT

    def test_mid_body_cut_classified_as_transport_abort(self, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, fault=FaultSpec(FaultKind.MID_BODY_CUT, 1.0)))
        r = fetch_conditional(f"{srv.base_url}/feeds/0", timeout=5)
        assert r.kind is FetchKind.FAILED
        assert r.failure in (FailureReason.TIMEOUT, FailureReason.TLS)

    def test_dns_failure(self):
        r = fetch_conditional("http://does-not-exist.invalid/feed", timeout=3)
        assert r.kind is FetchKind.FAILED
        assert r.failure in (FailureReason.DNS, FailureReason.TIMEOUT)


RSS_MINIMAL = b"""<?xml version="1.0" encoding="utf-8"?>
<rss version="2.0"><channel><title>c</title>
<item><title>t</title><link>http://x/1</link><guid>g1</guid></item>
</channel></rss>"""

ATOM_MINIMAL = b"""<?xml version="1.0" encoding="utf-8"?>
<feed xmlns="http://www.w3.org/2005/Atom"><title>c</title>
<entry><title>t</title><link href="http://x/1"/><id>urn:e1</id>
<updated>2024-01-01T00:00:00Z</updated></entry></feed>"""


class TestParseFeed:
    def test_minimal_rss(self):
        feed = parse_feed(RSS_MINIMAL)
        assert feed.format is FeedFormat.RSS2
        assert len(feed.items) == 1
        item = feed.items[0]
        assert (item.title, item.link, item.guid) == ("t", "http://x/1", "g1")

    def test_minimal_atom(self):
        feed = parse_feed(ATOM_MINIMAL)
        assert feed.format is FeedFormat.ATOM
        item = feed.items[0]
        assert item.guid == "urn:e1"
        assert item.link == "http://x/1"
        assert item.published == datetime(2024, 1, 1, tzinfo=timezone.utc)

    def test_rss_pubdate_parsed(self):
        body = (
            b"<rss><channel><item><guid>g</guid>"
            b"<pubDate>Mon, 01 Jan 2024 00:00:00 GMT</pubDate></item></channel></rss>"
        )
        feed = parse_feed(body)
        assert feed.items[0].published == datetime(2024, 1, 1, tzinfo=timezone.utc)

    def test_unparseable_date_tolerated(self):
        body = b"<rss><channel><item><guid>g</guid><pubDate>whenever</pubDate></item></channel></rss>"
        assert parse_feed(body).items[0].published is None

    def test_items_without_identity_skipped_and_counted(self):
        body = (
            b"<rss><channel>"
            b"<item><title>no id</title></item>"
            b"<item><guid>g1</guid></item>"
            b"<item><title>also none</title></item>"
            b"</channel></rss>"
        )
        feed = parse_feed(body)
        assert len(feed.items) == 1
        assert feed.skipped == 2

    def test_order_preserved(self):
        body = b"<rss><channel>" + b"".join(
            f"<item><guid>g{i}</guid></item>".encode() for i in range(5)
        ) + b"</channel></rss>"
        assert [it.guid for it in parse_feed(body).items] == [f"g{i}" for i in range(5)]

    def test_malformed_xml(self):
        with pytest.raises(ParseError) as exc_info:
            parse_feed(b"<rss><channel><item>")
        assert exc_info.value.kind is ParseErrorKind.NOT_XML

    def test_empty_body(self):
        with pytest.raises(ParseError) as exc_info:
            parse_feed(b"   ")
        assert exc_info.value.kind is ParseErrorKind.NOT_XML

    def test_unknown_format(self):
        with pytest.raises(ParseError) as exc_info:
            parse_feed(b"<html><body>nope</body></html>")
        assert exc_info.value.kind is ParseErrorKind.UNKNOWN_FORMAT

    def test_unsupported_declared_charset(self):
        with pytest.raises(ParseError) as exc_info:
            parse_feed(RSS_MINIMAL, declared_charset="klingon-8")
        assert exc_info.value.kind is ParseErrorKind.ENCODING_ERROR

    def test_declared_latin1_honored(self):
        body = '<?xml version="1.0" encoding="iso-8859-1"?><rss><channel><item><title>caf\xe9</title><guid>g</guid></item></channel></rss>'.encode(
            "latin-1"
        )
        assert parse_feed(body).items[0].title == "café"

    def test_invalid_utf8_replaced(self):
        body = b"<rss><channel><item><title>a\xff\xfeb</title><guid>g</guid></item></channel></rss>"
        feed = parse_feed(body)
        assert feed.items[0].guid == "g"

    def test_atom_prefers_alternate_link(self):
        body = (
            b'<feed xmlns="http://www.w3.org/2005/Atom"><entry>'
            b'<link rel="self" href="http://x/self"/>'
            b'<link rel="alternate" href="http://x/alt"/>'
            b"<id>e</id></entry></feed>"
        )
        assert parse_feed(body).items[0].link == "http://x/alt"

    @pytest.mark.parametrize("fmt", ["rss2", "atom"])
    def test_thousand_item_round_trip(self, fmt):
        scn = SimScenario(feed_count=1, items_per_poll=1000, rng_seed=77, feed_format=fmt)
        batch = FeedGenerator(scn, 0).next_batch()
        body = render_atom("t", batch) if fmt == "atom" else render_rss2("t", batch)
        feed = parse_feed(body)
        got = {(it.guid, it.title, it.link, it.published) for it in feed.items}
        want = {(it.guid, it.title, it.link, it.published) for it in batch}
        assert got == want
        assert feed.skipped == 0


class TestChannelUrl:
    def test_direct_channels(self):
        s = make_stream(url="https://h/feeds/0")
        assert channel_url(s, ChannelKind.NEWS) == "https://h/feeds/0"
        assert channel_url(s, ChannelKind.CUSTOM_RSS) == "https://h/feeds/0"

    def test_adapter_channels_marked(self):
        s = make_stream(url="https://h/feeds/0")
        assert channel_url(s, ChannelKind.TWITTER) == "https://h/feeds/0?channel=twitter"
        assert channel_url(s, ChannelKind.FACEBOOK) == "https://h/feeds/0?channel=facebook"

    def test_adapter_appends_to_existing_query(self):
        s = make_stream(url="https://h/feeds/0?x=1")
        assert channel_url(s, ChannelKind.TWITTER) == "https://h/feeds/0?x=1&channel=twitter"


def _prepared(store, srv, clock, stream_id="s1", channels=frozenset({ChannelKind.NEWS}), feed=0):
    stream = make_stream(stream_id, url=f"{srv.base_url}/feeds/{feed}", channels=channels, next_due=clock())
    store.upsert_stream(stream)
    picked = store.force_pick(stream_id, clock())
    return picked


class TestProcessMessage:
    def test_modified_path_ingests_and_marks(self, store, clock, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, items_per_poll=4, rng_seed=3))
        _prepared(store, srv, clock)
        fetchers = ChannelFetchers(timeout=5)
        outcome = process_message(make_msg("s1"), store, fetchers, clock)
        assert outcome.items_new == 4
        assert not outcome.not_modified
        s = store.get_stream("s1")
        assert s.status is StreamStatus.PROCESSED
        assert s.etag
        assert s.next_due == clock() + timedelta(seconds=300)
        assert store.count_items() == 4

    def test_not_modified_path(self, store, clock, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, duplicate_fraction=1.0, rng_seed=3))
        _prepared(store, srv, clock)
        fetchers = ChannelFetchers(timeout=5)
        process_message(make_msg("s1"), store, fetchers, clock)
        first_etag = store.get_stream("s1").etag
        store.force_pick("s1", clock())
        outcome = process_message(make_msg("s1"), store, fetchers, clock)
        assert outcome.not_modified
        assert outcome.items_new == 0
        s = store.get_stream("s1")
        assert s.status is StreamStatus.PROCESSED
        assert s.etag == first_etag

    def test_new_and_previously_seen_items(self, store, clock, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, items_per_poll=8, rng_seed=3))
        _prepared(store, srv, clock)
        # 3 of the 8 upcoming guids are already in the store.
        pre = [
            make_item("s1", f"urn:feedsim:0:{n}", f"http://feedsim.invalid/feeds/0/items/{n}")
            for n in (1, 2, 3)
        ]
        store.insert_items_dedup(pre)
        outcome = process_message(make_msg("s1"), store, ChannelFetchers(timeout=5), clock)
        assert outcome.items_new == 5
        assert store.count_items() == 8

    def test_failed_fetch_backs_off_stream(self, store, clock, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, fault=FaultSpec(FaultKind.MID_BODY_CUT, 1.0)))
        _prepared(store, srv, clock)
        outcome = process_message(make_msg("s1"), store, ChannelFetchers(timeout=5), clock)
        assert outcome.failed in ("timeout", "tls")
        s = store.get_stream("s1")
        assert s.status is StreamStatus.FAILED
        assert s.consecutive_failures == 1
        assert s.next_due == clock() + timedelta(seconds=600)

    def test_unknown_stream_completes_without_store_write(self, store, clock, sim_factory):
        sim_factory(SimScenario(feed_count=1))
        outcome = process_message(make_msg("ghost"), store, ChannelFetchers(timeout=5), clock)
        assert outcome.stream_missing
        assert store.count_streams() == 0
        assert store.count_items() == 0

    def test_parse_failure_marks_failed(self, store, clock, sim_factory, monkeypatch):
        srv = sim_factory(SimScenario(feed_count=1, rng_seed=3))
        _prepared(store, srv, clock)
        import feedmix.worker as worker_mod

        def broken_parse(body, declared_charset=None):
            raise ParseError(ParseErrorKind.NOT_XML, "injected")

        monkeypatch.setattr(worker_mod, "parse_feed", broken_parse)
        outcome = process_message(make_msg("s1"), store, ChannelFetchers(timeout=5), clock)
        assert outcome.failed == "parse_not_xml"
        assert store.get_stream("s1").status is StreamStatus.FAILED

    def test_permanent_redirect_rewrites_url_for_news(self, store, clock, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, redirect_hops=1, rng_seed=3))
        _prepared(store, srv, clock)
        process_message(make_msg("s1"), store, ChannelFetchers(timeout=5), clock)
        assert store.get_stream("s1").url.endswith("/feeds/0/hop/1")

    def test_adapter_channel_never_rewrites_url(self, store, clock, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, redirect_hops=1, rng_seed=3))
        _prepared(store, srv, clock, channels=frozenset({ChannelKind.TWITTER}))
        original = store.get_stream("s1").url
        outcome = process_message(
            make_msg("s1", channel=ChannelKind.TWITTER), store, ChannelFetchers(timeout=5), clock
        )
        assert outcome.items_new > 0
        assert store.get_stream("s1").url == original

    def test_exactly_one_mark_per_message(self, store, clock, sim_factory, monkeypatch):
        srv = sim_factory(SimScenario(feed_count=1, rng_seed=3))
        _prepared(store, srv, clock)
        calls = []
        original = store.mark_processed

        def counting_mark(*args, **kwargs):
            calls.append(args)
            return original(*args, **kwargs)

        monkeypatch.setattr(store, "mark_processed", counting_mark)
        process_message(make_msg("s1"), store, ChannelFetchers(timeout=5), clock)
        assert len(calls) == 1

    def test_idempotent_under_forced_redelivery(self, store, clock, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, items_per_poll=6, duplicate_fraction=1.0, rng_seed=3))
        _prepared(store, srv, clock)
        fetchers = ChannelFetchers(timeout=5)
        msg = make_msg("s1")
        process_message(msg, store, fetchers, clock)
        state_after_first = (store.get_stream("s1"), store.count_items())
        # Forced redelivery of the very same message; clock unchanged.
        outcome = process_message(msg, store, fetchers, clock)
        assert outcome.items_new == 0
        assert (store.get_stream("s1"), store.count_items()) == state_after_first

    def test_conditional_fetch_economy(self, store, clock, sim_factory):
        srv = sim_factory(SimScenario(feed_count=1, duplicate_fraction=1.0, rng_seed=3))
        _prepared(store, srv, clock)
        fetchers = ChannelFetchers(timeout=5)
        for _ in range(3):
            process_message(make_msg("s1"), store, fetchers, clock)
            store.force_pick("s1", clock())
        bodies = [rec for rec in srv.request_log if rec.status == 200 and rec.body_bytes > 0]
        assert len(bodies) == 1  # polls 2 and 3 transferred nothing

    def test_never_raises_across_fault_matrix(self, store, clock, sim_factory):
        for fault in (FaultKind.HTTP_500, FaultKind.MID_BODY_CUT):
            srv = sim_factory(SimScenario(feed_count=1, fault=FaultSpec(fault, 1.0), rng_seed=3))
            sid = f"s-{fault.value}"
            _prepared(store, srv, clock, stream_id=sid)
            outcome = process_message(make_msg(sid), store, ChannelFetchers(timeout=5), clock)
            assert outcome.failed is not None
