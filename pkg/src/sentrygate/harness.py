"""Exercise rig: a small in-process shop application, a deterministic
traffic generator that emits labeled traces, and the metric report used
to judge a replay.

Nothing here is part of the protection path; it exists so the proxy can
be trained, replayed, and measured end to end without a network.
"""

from __future__ import annotations

import itertools
import random
import urllib.parse
from dataclasses import dataclass, field

from .defender import ResponseAction
from .httpmsg import RawRequest, Response
from .pipeline import REJECTED, Verdict
from .trace import LABEL_ASSET, LABEL_ATTACK, LABEL_BENIGN, TraceRecord

# Credentials the stub accepts.  eve and frank are deliberately absent
# from every generated benign session: they exist so scripted misuse by
# an account with no trained profile can be exercised.
USERS: dict[str, tuple[str, str]] = {
    "alice": ("pw-alice-9", "member"),
    "bob": ("pw-bob-3", "member"),
    "carol": ("pw-carol-7", "member"),
    "mallory": ("pw-mallory-1", "member"),
    "eve": ("pw-eve-5", "member"),
    "frank": ("pw-frank-2", "member"),
    "dave": ("pw-dave-4", "admin"),
}

PRODUCTS: dict[int, tuple[str, str]] = {
    1: ("Walnut Desk", "129.50"),
    2: ("Oak Chair", "79.00"),
    3: ("Pine Shelf", "45.25"),
    4: ("Maple Stool", "30.00"),
    5: ("Birch Lamp", "52.75"),
}

_THEMES = ("light", "dark", "blue")
_PNG = b"\x89PNG\r\n\x1a\n" + b"\x00" * 64
_SERVER_BANNER = "Apache/2.4.41 (Ubuntu)"


class StubShop:
    """The protected application, as a callable the proxy forwards to.

    Auth state is keyed on the proxy-issued session cookie; successful
    logins are announced to the proxy through X-Auth-* headers, which the
    proxy consumes and strips.
    """

    def __init__(self, *, session_cookie: str = "SESSIONID") -> None:
        self.session_cookie = session_cookie
        self.auth: dict[str, str] = {}
        self.orders = 0

    # -- entry ---------------------------------------------------------------

    def __call__(self, raw: RawRequest) -> Response:
        path, _, query = raw.target.partition("?")
        path = urllib.parse.unquote(path)
        params = dict(urllib.parse.parse_qsl(query, keep_blank_values=True))
        cookies = self._cookies(raw)
        user = self.auth.get(cookies.get(self.session_cookie, ""))

        if raw.method == "GET":
            if path == "/":
                return self._home(raw, cookies)
            if path == "/login":
                return self._login_page()
            if path == "/logout":
                return self._logout(cookies)
            if path == "/search":
                return self._search(params)
            if path.startswith("/product/"):
                return self._product(path)
            if path == "/account":
                return self._account(user)
            if path == "/reports":
                return self._reports(user)
            if path == "/admin":
                return self._admin(user)
            if path == "/redirect":
                return self._redirect(params)
            if path.startswith("/static/") or path.startswith("/img/"):
                return self._asset(path)
        elif raw.method == "POST":
            if path == "/login":
                return self._do_login(raw, cookies)
            if path == "/purchase":
                return self._purchase(raw, user)
        return self._page(404, "<h1>Not found</h1><p>No such page.</p>")

    # -- helpers -------------------------------------------------------------

    def _cookies(self, raw: RawRequest) -> dict[str, str]:
        out: dict[str, str] = {}
        for header in raw.header_values("cookie"):
            for piece in header.split(";"):
                name, eq, value = piece.strip().partition("=")
                if eq:
                    out[name] = value
        return out

    def _page(self, status: int, body_html: str,
              extra: list[tuple[str, str]] | None = None) -> Response:
        body = (f"<html><head><title>Walnut &amp; Oak</title></head>"
                f"<body>{body_html}</body></html>").encode("utf-8")
        headers = [("Content-Type", "text/html; charset=utf-8"),
                   ("Content-Length", str(len(body))),
                   ("Server", _SERVER_BANNER)]
        if extra:
            headers.extend(extra)
        return Response(status=status, headers=headers, body=body)

    @staticmethod
    def _search_form() -> str:
        return ('<form method="GET" action="/search">'
                '<input name="q" value="">'
                '<input name="since" value="">'
                '<select name="sort"><option>price_asc</option>'
                '<option>price_desc</option><option>rating</option></select>'
                '<input type="hidden" name="page" value="1">'
                '<button>Search</button></form>')

    # -- routes --------------------------------------------------------------

    def _home(self, raw: RawRequest, cookies: dict[str, str]) -> Response:
        links = "".join(f'<a href="/product/{pid}">{name}</a> '
                        for pid, (name, _p) in PRODUCTS.items())
        body = ('<link rel="stylesheet" href="/static/site.css">'
                '<script src="/static/app.js"></script>'
                '<h1>Walnut &amp; Oak</h1>'
                + self._search_form() + links +
                '<a href="/redirect?target=https://partner.example/promo">'
                'Partner promo</a> <a href="/login">Sign in</a>')
        extra = []
        if "prefs" not in cookies:
            theme = _THEMES[sum(raw.source_ip.encode()) % len(_THEMES)]
            extra.append(("Set-Cookie", f"prefs={theme}; Path=/"))
        return self._page(200, body, extra)

    def _login_page(self) -> Response:
        return self._page(200, (
            '<h1>Sign in</h1><form method="POST" action="/login">'
            '<input name="user"><input type="password" name="pass">'
            '<button>Sign in</button></form>'))

    def _do_login(self, raw: RawRequest, cookies: dict[str, str]) -> Response:
        form = dict(urllib.parse.parse_qsl(
            raw.body.decode("iso-8859-1"), keep_blank_values=True))
        username = form.get("user", "")
        password = form.get("pass", "")
        known = USERS.get(username)
        if known is None or known[0] != password:
            return self._page(401, "<h1>Sign in failed</h1>")
        sid = cookies.get(self.session_cookie)
        if sid:
            self.auth[sid] = username
        return self._page(200, f"<h1>Welcome {username}</h1>"
                               '<a href="/account">Your account</a>',
                          [("X-Auth-User", username),
                           ("X-Auth-Role", known[1])])

    def _logout(self, cookies: dict[str, str]) -> Response:
        sid = cookies.get(self.session_cookie, "")
        extra = []
        if sid in self.auth:
            del self.auth[sid]
            extra.append(("X-Auth-Logout", "1"))
        return self._page(200, "<h1>Signed out</h1>", extra)

    def _search(self, params: dict[str, str]) -> Response:
        q = params.get("q", "")
        hits = [(pid, name) for pid, (name, _p) in PRODUCTS.items()
                if q.lower() in name.lower()] if q else list(
                    (pid, name) for pid, (name, _p) in PRODUCTS.items())
        rows = "".join(f'<a href="/product/{pid}">{name}</a> '
                       for pid, name in hits) or "<p>No matches.</p>"
        leak = ""
        if "error" in q.lower():
            # Deliberately sloppy diagnostic text for the scrubber to catch.
            leak = ("<pre>[Microsoft][ODBC SQL Server Driver][SQL Server]"
                    "Syntax error converting value</pre>")
        nav = ""
        page = params.get("page", "1")
        if page.isdigit() and int(page) < 3:
            keep = [("q", q), ("since", params.get("since", "")),
                    ("sort", params.get("sort", "price_asc")),
                    ("page", str(int(page) + 1))]
            nav = f'<a href="/search?{urllib.parse.urlencode(keep)}">next</a>'
        return self._page(200, ("<h1>Results</h1>" + self._search_form()
                                + rows + leak + nav))

    def _product(self, path: str) -> Response:
        tail = path.rsplit("/", 1)[-1]
        if not tail.isdigit() or int(tail) not in PRODUCTS:
            return self._page(404, "<h1>Not found</h1><p>No such product.</p>")
        pid = int(tail)
        name, price = PRODUCTS[pid]
        return self._page(200, (
            f'<h1>{name}</h1><img src="/img/{pid}"><p>Price: ${price}</p>'
            '<form method="POST" action="/purchase">'
            f'<input type="hidden" name="ProductId" value="{pid}">'
            f'<input type="hidden" name="Price" value="{price}">'
            '<input name="quantity" value="1"><button>Buy</button></form>'
            '<a href="/">Home</a>'))

    def _purchase(self, raw: RawRequest, user: str | None) -> Response:
        if user is None:
            return self._page(403, "<h1>Sign in to order</h1>")
        form = dict(urllib.parse.parse_qsl(
            raw.body.decode("iso-8859-1"), keep_blank_values=True))
        self.orders += 1
        pid = form.get("ProductId", "?")
        qty = form.get("quantity", "1")
        return self._page(200, (f"<h1>Thank you {user}</h1>"
                                f"<p>Order {self.orders}: {qty} of product "
                                f"{pid} confirmed.</p><a href='/'>Home</a>"))

    def _account(self, user: str | None) -> Response:
        if user is None:
            return self._page(403, "<h1>Sign in first</h1>")
        return self._page(200, (
            f"<h1>Account</h1><p>Signed in as {user}.</p>"
            '<a href="/reports">Reports</a> <a href="/product/1">Walnut Desk'
            '</a> <a href="/logout">Sign out</a>'))

    def _reports(self, user: str | None) -> Response:
        if user is None:
            return self._page(403, "<h1>Sign in first</h1>")
        return self._page(200, "<h1>Usage reports</h1><p>All quiet.</p>")

    def _admin(self, user: str | None) -> Response:
        if user is None or USERS.get(user, ("", ""))[1] != "admin":
            return self._page(403, "<h1>Admins only</h1>")
        return self._page(200, f"<h1>Admin console</h1>"
                               f"<p>Orders so far: {self.orders}</p>")

    def _redirect(self, params: dict[str, str]) -> Response:
        target = params.get("target", "/")
        body = b"Redirecting"
        return Response(status=302, headers=[
            ("Location", target),
            ("Content-Type", "text/plain"),
            ("Content-Length", str(len(body))),
            ("Server", _SERVER_BANNER)], body=body)

    def _asset(self, path: str) -> Response:
        if path.endswith(".css"):
            body, ctype = b"body{font-family:sans-serif}", "text/css"
        elif path.endswith(".js"):
            body, ctype = b"console.log('shop');", "application/javascript"
        else:
            body, ctype = _PNG, "image/png"
        return Response(status=200, headers=[
            ("Content-Type", ctype), ("Content-Length", str(len(body))),
            ("Server", _SERVER_BANNER)], body=body)


# --- trace generation -------------------------------------------------------

_QUERY_POOL = [
    "walnut desk", "oak chair", "pine shelf", "red shoes", "blue socks",
    "maple stool", "birch lamp", "garden bench", "error test", "lamp",
    "desk", "chair",
]
_SORTS = ("price_asc", "price_desc", "rating")

_UA = {
    "alice": "Mozilla/5.0 (X11; Linux x86_64) Gecko/20100101 Firefox/118.0",
    "bob": "Mozilla/5.0 (Windows NT 10.0; Win64) Chrome/117.0 Safari/537.36",
    "carol": "Mozilla/5.0 (Macintosh; Intel Mac OS X 13_4) Safari/605.1.15",
    "mallory": "Mozilla/5.0 (X11; Ubuntu; Linux i686) Firefox/115.0",
    "dave": "Mozilla/5.0 (X11; Linux x86_64) Chrome/118.0 Safari/537.36",
    "anon": "Mozilla/5.0 (Windows NT 10.0) Gecko/20100101 Firefox/117.0",
}

_TRAIN_T0 = 1_700_000_000.0
_EVAL_T0 = 1_700_400_000.0


class _Browser:
    """One logical browser context walking the site along a script."""

    def __init__(self, gen: "_Gen", ip: str, ctx: str, ua: str, t: float):
        self.gen = gen
        self.ip = ip
        self.ctx = ctx
        self.ua = ua
        self.t = t

    def hit(self, method: str, target: str, *, body: str = "",
            headers: list[tuple[str, str]] | None = None,
            label: str = LABEL_BENIGN, attack: str | None = None,
            scenario: str | None = None,
            gap: tuple[float, float] = (1.0, 4.0)) -> None:
        hdrs = [("Host", "shop.local"), ("User-Agent", self.ua),
                ("Accept", "text/html,application/xhtml+xml")]
        if body:
            hdrs.append(("Content-Type", "application/x-www-form-urlencoded"))
        if headers:
            hdrs.extend(headers)
        self.gen.records.append(TraceRecord(
            ts=self.t, ip=self.ip, ctx=self.ctx, method=method, target=target,
            headers=hdrs, body=body.encode("iso-8859-1"), label=label,
            attack_class=attack, scenario=scenario))
        self.t += self.gen.rng.uniform(*gap)

    def assets(self, names: tuple[str, ...] = ("/static/site.css",
                                               "/static/app.js",
                                               "/static/logo.png")) -> None:
        for name in names:
            self.hit("GET", name, label=LABEL_ASSET, gap=(0.05, 0.2))

    def search(self, q: str, since: str, sort: str, page: str = "1") -> str:
        target = "/search?" + urllib.parse.urlencode(
            [("q", q), ("since", since), ("sort", sort), ("page", page)])
        self.hit("GET", target)
        return target

    def login(self, user: str) -> None:
        self.hit("GET", "/login")
        self.hit("POST", "/login",
                 body=(f"user={user}&pass={USERS[user][0]}"
                       f"&__ips_token={{{{csrf:{self.ctx}}}}}"))


class _Gen:
    def __init__(self, seed: int) -> None:
        self.rng = random.Random(seed)
        self.records: list[TraceRecord] = []
        self._ctx = itertools.count(1)

    def browser(self, ip: str, user_or_anon: str, t: float) -> _Browser:
        ctx = f"{user_or_anon}-{next(self._ctx)}"
        return _Browser(self, ip, ctx, _UA.get(user_or_anon, _UA["anon"]), t)

    def _date(self) -> str:
        return (f"2023-{self.rng.randint(9, 11):02d}"
                f"-{self.rng.randint(1, 28):02d}")

    # -- benign session programs --------------------------------------------

    def flow_shop(self, b: _Browser, user: str) -> None:
        b.hit("GET", "/")
        b.assets()
        b.login(user)
        pid = self.rng.choice(sorted(PRODUCTS))
        b.hit("GET", f"/product/{pid}")
        b.hit("GET", f"/img/{pid}", label=LABEL_ASSET, gap=(0.05, 0.2))
        _name, price = PRODUCTS[pid]
        qty = self.rng.randint(1, 3)
        base = (f"ProductId={pid}&Price={price}&quantity={qty}"
                f"&__ips_token={{{{csrf:{b.ctx}}}}}")
        # First try gets challenged for a second factor, then succeeds.
        b.hit("POST", "/purchase", body=base)
        b.hit("POST", "/purchase",
              body=base + f"&__ips_otp={{{{otp:{b.ctx}}}}}")
        b.hit("GET", "/account")
        b.hit("GET", "/logout")

    def flow_browse(self, b: _Browser) -> None:
        b.hit("GET", "/")
        b.assets()
        q = self.rng.choice(_QUERY_POOL)
        sort = self.rng.choice(_SORTS)
        since = self._date()
        b.search(q, since, sort, "1")
        if self.rng.random() < 0.25:
            # Typed pagination jump to a page number no link has offered yet.
            b.search(q, since, sort, "3")
        b.search(q, since, sort, "2")
        b.search(self.rng.choice(_QUERY_POOL), self._date(),
                 self.rng.choice(_SORTS), "1")
        pid = self.rng.choice(sorted(PRODUCTS))
        b.hit("GET", f"/product/{pid}")
        b.hit("GET", f"/img/{pid}", label=LABEL_ASSET, gap=(0.05, 0.2))
        if self.rng.random() < 0.3:
            b.hit("GET", "/redirect?" + urllib.parse.urlencode(
                [("target", "https://partner.example/promo")]))

    def flow_reports(self, b: _Browser, user: str) -> None:
        b.hit("GET", "/")
        b.assets()
        b.login(user)
        b.hit("GET", "/account")
        b.hit("GET", "/reports")
        b.hit("GET", f"/product/{self.rng.choice(sorted(PRODUCTS))}")
        b.hit("GET", "/logout")

    def flow_admin(self, b: _Browser) -> None:
        b.hit("GET", "/")
        b.assets()
        b.login("dave")
        b.hit("GET", "/admin")
        b.hit("GET", "/reports")
        b.hit("GET", "/logout")


def _schedule(gen: _Gen, plans: list, t0: float, spread: float) -> None:
    # Jitter stays under spread so same-address sessions cannot stack up
    # inside one rate window.
    gen.rng.shuffle(plans)
    for i, plan in enumerate(plans):
        start = t0 + i * spread + gen.rng.uniform(0.0, spread * 0.4)
        plan(start)


def generate_training_trace(seed: int) -> list[TraceRecord]:
    gen = _Gen(seed)
    homes = {"alice": "10.0.1.11", "bob": "10.0.1.12", "carol": "10.0.1.13",
             "mallory": "10.0.1.14", "dave": "10.0.1.15"}
    plans = []
    for user in ("alice", "bob", "carol", "mallory"):
        ip = homes[user]
        for _ in range(5):
            plans.append(lambda t, u=user, i=ip:
                         gen.flow_shop(gen.browser(i, u, t), u))
        for _ in range(4):
            plans.append(lambda t, u=user, i=ip:
                         gen.flow_browse(gen.browser(i, u, t)))
        for _ in range(3):
            plans.append(lambda t, u=user, i=ip:
                         gen.flow_reports(gen.browser(i, u, t), u))
    for _ in range(4):
        plans.append(lambda t: gen.flow_shop(
            gen.browser(homes["dave"], "dave", t), "dave"))
    for _ in range(5):
        plans.append(lambda t: gen.flow_admin(
            gen.browser(homes["dave"], "dave", t)))
    for _ in range(2):
        plans.append(lambda t: gen.flow_browse(
            gen.browser(homes["dave"], "dave", t)))
    for k in range(10):
        plans.append(lambda t, k=k: gen.flow_browse(
            gen.browser(f"10.0.2.{40 + k}", "anon", t)))
    _schedule(gen, plans, _TRAIN_T0, 130.0)
    gen.records.sort(key=lambda r: r.ts)
    return gen.records


def generate_eval_trace(seed: int, *, min_benign: int = 500
                        ) -> list[TraceRecord]:
    gen = _Gen(seed + 1)
    homes = {"alice": "10.0.1.11", "bob": "10.0.1.12", "carol": "10.0.1.13",
             "dave": "10.0.1.15"}
    plans = []
    # mallory sits eval's benign schedule out: her account is scripted to
    # end up blocked by the tampering scenario below.
    for user in ("alice", "bob", "carol"):
        ip = homes[user]
        for _ in range(3):
            plans.append(lambda t, u=user, i=ip:
                         gen.flow_shop(gen.browser(i, u, t), u))
        for _ in range(3):
            plans.append(lambda t, u=user, i=ip:
                         gen.flow_browse(gen.browser(i, u, t)))
        for _ in range(2):
            plans.append(lambda t, u=user, i=ip:
                         gen.flow_reports(gen.browser(i, u, t), u))
    for _ in range(2):
        plans.append(lambda t: gen.flow_shop(
            gen.browser(homes["dave"], "dave", t), "dave"))
    for _ in range(2):
        plans.append(lambda t: gen.flow_admin(
            gen.browser(homes["dave"], "dave", t)))
    for k in range(45):
        plans.append(lambda t, k=k: gen.flow_browse(
            gen.browser(f"10.0.2.{60 + k}", "anon", t)))
    # A listed friendly crawler: skipped by the screen, never alerted on.
    plans.append(lambda t: _goodbot_visit(gen, t))
    _schedule(gen, plans, _EVAL_T0, 90.0)

    _attack_scenarios(gen, _EVAL_T0 + 400.0)
    gen.records.sort(key=lambda r: r.ts)

    benign = sum(1 for r in gen.records if r.label == LABEL_BENIGN)
    top_up = itertools.count(120)
    while benign < min_benign:
        b = gen.browser(f"10.0.3.{next(top_up) % 200}", "anon",
                        _EVAL_T0 + gen.rng.uniform(0, 3000))
        gen.flow_browse(b)
        gen.records.sort(key=lambda r: r.ts)
        benign = sum(1 for r in gen.records if r.label == LABEL_BENIGN)
    return gen.records


def _goodbot_visit(gen: _Gen, t: float) -> None:
    b = _Browser(gen, "198.51.100.9", f"goodbot-{next(gen._ctx)}",
                 "FriendlyBot/1.0 (+https://bots.example)", t)
    for target in ("/", "/search?q=desk&since=2023-10-01&sort=rating&page=1",
                   "/product/1"):
        b.hit("GET", target, gap=(2.0, 4.0))


def _attack_scenarios(gen: _Gen, t0: float) -> None:
    def at(offset: float) -> float:
        return t0 + offset

    # 1. Classic quoted tautology in the free-text search field.
    b = gen.browser("203.0.113.10", "anon", at(0))
    b.hit("GET", "/search?" + urllib.parse.urlencode(
        [("q", "' OR '1'='1"), ("since", "2023-10-10"),
         ("sort", "price_asc"), ("page", "1")]),
        label=LABEL_ATTACK, attack="sqli", scenario="sqli-tautology")

    # 2. Script tag reflected through the search box.
    b = gen.browser("203.0.113.11", "anon", at(90))
    b.hit("GET", "/search?" + urllib.parse.urlencode(
        [("q", "<script>alert(1)</script>"), ("since", "2023-10-10"),
         ("sort", "rating"), ("page", "1")]),
        label=LABEL_ATTACK, attack="xss", scenario="xss-script")

    # 3. Same payload wrapped in a second encoding layer.
    once = urllib.parse.quote("<script>alert(1)</script>")
    b = gen.browser("203.0.113.12", "anon", at(180))
    b.hit("GET", "/search?" + urllib.parse.urlencode(
        [("q", once), ("since", "2023-10-11"), ("sort", "rating"),
         ("page", "1")]),
        label=LABEL_ATTACK, attack="xss", scenario="xss-double-encoded")

    # 4. Non-number where the pagination number belongs.
    b = gen.browser("203.0.113.13", "anon", at(270))
    b.hit("GET", "/search?" + urllib.parse.urlencode(
        [("q", "shoes"), ("since", "2023-10-12"), ("sort", "price_asc"),
         ("page", "abc")]),
        label=LABEL_ATTACK, attack="type_violation", scenario="type-page")

    # 5. A value outside the learned closed set.
    b = gen.browser("203.0.113.14", "anon", at(360))
    b.hit("GET", "/search?" + urllib.parse.urlencode(
        [("q", "shoes"), ("since", "2023-10-13"), ("sort", "admin"),
         ("page", "1")]),
        label=LABEL_ATTACK, attack="enum_violation", scenario="enum-sort")

    # 6. Garbage where a date-shaped value belongs.
    b = gen.browser("203.0.113.15", "anon", at(450))
    b.hit("GET", "/search?" + urllib.parse.urlencode(
        [("q", "shoes"), ("since", "!!@@##$$%%^^&&**"),
         ("sort", "price_desc"), ("page", "1")]),
        label=LABEL_ATTACK, attack="format_violation", scenario="format-since")

    # 7. Redirect target pointing off the trusted list.
    b = gen.browser("203.0.113.16", "anon", at(540))
    b.hit("GET", "/redirect?" + urllib.parse.urlencode(
        [("target", "https://evil.example/phish")]),
        label=LABEL_ATTACK, attack="open_redirect", scenario="redirect-evil")

    # 8. Hidden price rewritten before checkout (trained account).
    b = gen.browser("203.0.113.17", "mallory", at(620))
    b.hit("GET", "/", scenario="tamper-price")
    b.login("mallory")
    b.hit("GET", "/product/2", scenario="tamper-price")
    b.hit("POST", "/purchase",
          body=(f"ProductId=2&Price=0.01&quantity=1"
                f"&__ips_token={{{{csrf:{b.ctx}}}}}"),
          label=LABEL_ATTACK, attack="tampering", scenario="tamper-price")

    # 9. Stolen session cookie used from a different address and agent.
    victim = gen.browser("10.0.1.11", "alice", at(700))
    victim.hit("GET", "/", scenario="hijack-cookie")
    victim.assets()
    victim.login("alice")
    victim.hit("GET", "/account", scenario="hijack-cookie")
    thief = _Browser(gen, "203.0.113.77", f"thief-{next(gen._ctx)}",
                     "Mozilla/5.0 (Stolen Profile)", victim.t + 20.0)
    thief.hit("GET", "/account",
              headers=[("Cookie",
                        f"SESSIONID={{{{session:{victim.ctx}}}}}")],
              label=LABEL_ATTACK, attack="session_hijack",
              scenario="hijack-cookie")

    # 10. State-changing request with the token stripped.
    b = gen.browser("10.0.1.13", "carol", at(800))
    b.hit("GET", "/", scenario="csrf-forged")
    b.login("carol")
    b.hit("GET", "/product/3", scenario="csrf-forged")
    b.hit("POST", "/purchase", body="ProductId=3&Price=45.25&quantity=1",
          label=LABEL_ATTACK, attack="csrf", scenario="csrf-forged")

    # 11. Password stuffing against one account.
    b = gen.browser("203.0.113.30", "anon", at(880))
    b.hit("GET", "/login", label=LABEL_ATTACK, attack="brute_force",
          scenario="brute-login", gap=(1.8, 2.4))
    for k in range(8):
        b.hit("POST", "/login",
              body=(f"user=alice&pass=wrong-{k}"
                    f"&__ips_token={{{{csrf:{b.ctx}}}}}"),
              label=LABEL_ATTACK, attack="brute_force",
              scenario="brute-login", gap=(1.8, 2.4))

    # 12. Plain volume flood from one address.
    b = gen.browser("203.0.113.99", "anon", at(960))
    b.ua = "FloodClient/1.0"
    for k in range(90):
        target = "/" if k % 3 == 0 else f"/product/{(k % 5) + 1}"
        b.hit("GET", target, label=LABEL_ATTACK, attack="bot",
              scenario="bot-flood", gap=(0.55, 0.8))

    # 13. Sequential id scan producing a wall of 404s.
    b = gen.browser("203.0.113.44", "anon", at(1100))
    for k in range(30):
        b.hit("GET", f"/product/{9001 + k}", label=LABEL_ATTACK,
              attack="bot", scenario="bot-scan-404", gap=(1.3, 1.7))

    # 14. Agent string straight off the bad-bot list.
    b = gen.browser("203.0.113.88", "anon", at(1200))
    b.ua = "EvilScanner/2.1 (+http://scan.invalid)"
    for _ in range(3):
        b.hit("GET", "/", label=LABEL_ATTACK, attack="bot",
              scenario="bot-bad-agent", gap=(1.0, 2.0))

    # 15. Valid member credentials walking into the admin panel.
    b = gen.browser("203.0.113.60", "anon", at(1260))
    b.hit("GET", "/", scenario="forced-admin")
    b.login("eve")
    b.hit("GET", "/admin", label=LABEL_ATTACK,
          attack="unauthorized_access", scenario="forced-admin")
    b.hit("GET", "/account", label=LABEL_ATTACK,
          attack="unauthorized_access", scenario="forced-admin")

    # 16. Probe for a route the policy never mentions.
    b = gen.browser("203.0.113.61", "anon", at(1340))
    b.hit("GET", "/", scenario="unlisted-backup")
    b.login("frank")
    b.hit("GET", "/internal/backup", label=LABEL_ATTACK,
          attack="unauthorized_access", scenario="unlisted-backup")


# --- deployment files -------------------------------------------------------

def write_environment(base_dir: str) -> "Config":
    """Lay down a complete runnable deployment directory: key material,
    config, access policy, rule packs, bot lists, block seed."""
    import json
    import os

    from .config import Config
    from .data_validator import STARTER_RULES
    from .response_controller import DEFAULT_LEAK_RULES

    os.makedirs(base_dir, exist_ok=True)
    os.makedirs(os.path.join(base_dir, "logs"), exist_ok=True)

    def put(name: str, data: bytes) -> None:
        with open(os.path.join(base_dir, name), "wb") as fh:
            fh.write(data)

    def put_json(name: str, obj) -> None:
        put(name, json.dumps(obj, indent=1).encode("utf-8") + b"\n")

    put("secret.key", bytes(range(32)))

    visitor = [["GET", "/"], ["GET", "/login"], ["POST", "/login"],
               ["GET", "/logout"], ["GET", "/search"],
               ["GET", "/product/{id}"], ["GET", "/redirect"]]
    member = visitor + [["GET", "/account"], ["POST", "/purchase"]]
    admin = member + [["GET", "/admin"]]
    put_json("policy.json", {
        "roles": ["visitor", "member", "admin"],
        "grants": {"visitor": visitor, "member": member, "admin": admin},
        "sensitive": [["POST", "/purchase"]],
    })

    put_json("signatures.json", STARTER_RULES)
    put_json("leak_rules.json", DEFAULT_LEAK_RULES)
    put("good_bots.txt", b"# friendly crawlers\n198.51.100.\n")
    put("bad_bots.txt", b"# known abusive sources\n192.0.2.50\n"
                        b"evilscanner\ngrabber\n")
    put_json("blocklist_seed.json", [
        {"kind": "protected_prefix", "key": "/includes/",
         "ttl": "permanent", "reason": "server-side include tree"},
    ])

    put_json("config.json", {
        "listen": "127.0.0.1:8080",
        "upstream": "127.0.0.1:9000",
        "secret_file": "secret.key",
        "policy_file": "policy.json",
        "signature_file": "signatures.json",
        "leak_rules_file": "leak_rules.json",
        "good_bots_file": "good_bots.txt",
        "bad_bots_file": "bad_bots.txt",
        "blocklist_seed_file": "blocklist_seed.json",
        "log_dir": "logs",
        "gap_report_file": "gap_report.jsonl",
        "replay_seed": 7,
    })
    return Config.from_file(os.path.join(base_dir, "config.json"))


# --- metrics ---------------------------------------------------------------

STATEFUL_NOTE = ("detection is credited per scenario: an attack scenario "
                 "counts as caught when any of its requests raised an alert "
                 "of the expected class")


@dataclass
class MetricsReport:
    total: int = 0
    benign: int = 0
    attack: int = 0
    asset: int = 0
    alerts: int = 0
    benign_alerts: int = 0
    false_positives: int = 0
    fp_details: list[dict] = field(default_factory=list)
    per_class: dict[str, dict] = field(default_factory=dict)
    per_scenario: dict[str, dict] = field(default_factory=dict)
    confusion: dict[str, dict[str, int]] = field(default_factory=dict)
    actions_by_class: dict[str, dict[str, int]] = field(default_factory=dict)

    def detection_floor(self) -> float:
        rates = [row["rate"] for row in self.per_class.values()]
        return min(rates) if rates else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total, "benign": self.benign,
            "attack": self.attack, "asset": self.asset,
            "alerts": self.alerts, "benign_alerts": self.benign_alerts,
            "false_positives": self.false_positives,
            "fp_details": self.fp_details,
            "per_class": {k: dict(v) for k, v in sorted(self.per_class.items())},
            "per_scenario": {k: dict(v)
                             for k, v in sorted(self.per_scenario.items())},
            "confusion": {k: dict(sorted(v.items()))
                          for k, v in sorted(self.confusion.items())},
            "actions_by_class": {k: dict(sorted(v.items()))
                                 for k, v in sorted(self.actions_by_class.items())},
            "note": STATEFUL_NOTE,
        }


def _stops(action: ResponseAction | None) -> bool:
    return action is not None and action.stops_request


def evaluate(results: list[tuple[TraceRecord, Verdict]]) -> MetricsReport:
    """Score one replay: scenario-level detection per attack class, strict
    action-threshold false positives on benign records."""
    report = MetricsReport(total=len(results))
    scenario_class: dict[str, str] = {}
    scenario_hit: dict[str, bool] = {}

    for rec, verdict in results:
        if rec.label == LABEL_ASSET:
            report.asset += 1
        elif rec.label == LABEL_ATTACK:
            report.attack += 1
        else:
            report.benign += 1

        if verdict.alert is not None:
            report.alerts += 1
            cls = verdict.alert.attack_class
            row = report.actions_by_class.setdefault(cls, {})
            kind = verdict.action.kind if verdict.action else "none"
            row[kind] = row.get(kind, 0) + 1
            if rec.label != LABEL_ATTACK:
                report.benign_alerts += 1

        if rec.label == LABEL_BENIGN and _stops(verdict.action):
            report.false_positives += 1
            report.fp_details.append({
                "ts": rec.ts, "ip": rec.ip, "target": rec.target,
                "action": verdict.action.kind, "status": verdict.status,
                "alert": (verdict.alert.attack_class
                          if verdict.alert else None)})

        if rec.label == LABEL_ATTACK:
            name = rec.scenario or f"adhoc-{rec.attack_class}"
            scenario_class[name] = rec.attack_class
            got = (verdict.alert is not None
                   and verdict.alert.attack_class == rec.attack_class)
            scenario_hit[name] = scenario_hit.get(name, False) or got
            row = report.confusion.setdefault(rec.attack_class, {})
            if verdict.alert is not None:
                col = verdict.alert.attack_class
            elif verdict.outcome == REJECTED:
                col = "(blocked)"
            else:
                col = "(none)"
            row[col] = row.get(col, 0) + 1

    for name, cls in scenario_class.items():
        hit = scenario_hit[name]
        report.per_scenario[name] = {"class": cls, "detected": hit}
        row = report.per_class.setdefault(
            cls, {"scenarios": 0, "detected": 0, "rate": 0.0})
        row["scenarios"] += 1
        row["detected"] += 1 if hit else 0
    for row in report.per_class.values():
        row["rate"] = row["detected"] / row["scenarios"]
    return report
