//! HTML to line-oriented text.

use ego_tree::NodeRef;
use scraper::{ElementRef, Html, Node, Selector};

const BLOCK_TAGS: &[&str] = &[
    "address", "article", "blockquote", "body", "caption", "dd", "details", "dialog", "div",
    "dl", "dt", "fieldset", "figcaption", "figure", "form", "h1", "h2", "h3", "h4", "h5", "h6",
    "hr", "li", "main", "ol", "p", "pre", "section", "summary", "table", "tbody", "td", "tfoot",
    "th", "thead", "tr", "ul",
];

const NEVER_TEXT: &[&str] = &[
    "script", "style", "noscript", "template", "svg", "canvas", "iframe", "object", "head",
    "button", "select", "input", "textarea",
];

/// Page chrome dropped when extracting the main content.
const BOILERPLATE: &[&str] = &["nav", "header", "footer", "aside", "menu"];

struct LineBuf {
    lines: Vec<String>,
    current: String,
}

impl LineBuf {
    fn ensure_space(&mut self) {
        if !self.current.is_empty() && !self.current.ends_with(' ') {
            self.current.push(' ');
        }
    }

    /// Appends a text node. Whitespace at node edges becomes a single
    /// separating space, so inline markup does not glue or split words.
    fn push_text(&mut self, t: &str) {
        for (i, word) in t.split_whitespace().enumerate() {
            if i > 0 || t.starts_with(char::is_whitespace) {
                self.ensure_space();
            }
            self.current.push_str(word);
        }
        if t.ends_with(char::is_whitespace) {
            self.ensure_space();
        }
    }

    fn flush(&mut self) {
        let line = self.current.trim().to_string();
        if !line.is_empty() {
            self.lines.push(line);
        }
        self.current.clear();
    }
}

fn walk(node: NodeRef<'_, Node>, skip_boilerplate: bool, buf: &mut LineBuf) {
    match node.value() {
        Node::Text(t) => buf.push_text(t),
        Node::Element(e) => {
            let name = e.name();
            if NEVER_TEXT.contains(&name) || (skip_boilerplate && BOILERPLATE.contains(&name)) {
                return;
            }
            if name == "br" {
                buf.flush();
                return;
            }
            let block = BLOCK_TAGS.contains(&name);
            if block {
                buf.flush();
            }
            for child in node.children() {
                walk(child, skip_boilerplate, buf);
            }
            if block {
                buf.flush();
            }
        }
        Node::Document | Node::Fragment => {
            for child in node.children() {
                walk(child, skip_boilerplate, buf);
            }
        }
        _ => {}
    }
}

/// Block-level lines of one subtree.
pub fn element_lines(el: ElementRef<'_>, skip_boilerplate: bool) -> Vec<String> {
    let mut buf = LineBuf {
        lines: Vec::new(),
        current: String::new(),
    };
    walk(*el, skip_boilerplate, &mut buf);
    buf.flush();
    buf.lines
}

/// Lines of the document's main content: the first `main`, `[role=main]`
/// or `article` element if any, else the whole body, with page chrome
/// removed.
pub fn main_content_lines(doc: &Html) -> Vec<String> {
    for sel in ["main", "[role=main]", "article"] {
        let selector = Selector::parse(sel).expect("static selector");
        let mut matches = doc.select(&selector).peekable();
        if matches.peek().is_some() {
            let mut lines = Vec::new();
            for el in matches {
                // skip nested matches already covered by an outer one
                if el.ancestors().filter_map(ElementRef::wrap).any(|a| a.value().name() == el.value().name()) {
                    continue;
                }
                lines.extend(element_lines(el, true));
            }
            if !lines.is_empty() {
                return lines;
            }
        }
    }
    let body = Selector::parse("body").expect("static selector");
    match doc.select(&body).next() {
        Some(b) => element_lines(b, true),
        None => element_lines(doc.root_element(), true),
    }
}

/// All visible lines, chrome included.
pub fn all_lines(doc: &Html) -> Vec<String> {
    element_lines(doc.root_element(), false)
}
