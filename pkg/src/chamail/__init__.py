"""chamail: a credential-scoped IMAP proxy.

An account owner mints multiple passwords for one mailbox. The real
password gives full passthrough access; every additional password belongs
to a named sub-user and is bound to a visibility policy (sender black/white
lists, keyword rules). Sub-user sessions see a seamlessly renumbered
mailbox with no observable trace of the hidden messages.
"""

__version__ = "0.1.0"
