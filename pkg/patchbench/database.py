"""
Database configuration και sessions για το run history.

Το URL έρχεται από το PATCHBENCH_DB (default: sqlite:///./patchbench.db).
Το engine φτιάχνεται την πρώτη φορά που χρειάζεται, για κάθε URL ξεχωριστά.
"""

from contextlib import contextmanager
from typing import Dict, Iterator, Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from .settings import get_settings

# Base class για τα models - όλα τα tables κληρονομούν από αυτό
Base = declarative_base()

_engines: Dict[str, Engine] = {}


def get_engine(url: Optional[str] = None) -> Engine:
    url = url or get_settings().database_url
    if url not in _engines:
        # check_same_thread: απαραίτητο για SQLite όταν τρέχουμε με threads
        connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
        engine = create_engine(url, connect_args=connect_args)
        Base.metadata.create_all(bind=engine)
        _engines[url] = engine
    return _engines[url]


@contextmanager
def get_db(url: Optional[str] = None) -> Iterator[Session]:
    """
    Δίνει μια database session και την κλείνει στο τέλος.

    Commit γίνεται μόνο αν το block τελειώσει χωρίς exception.
    """
    session = sessionmaker(autocommit=False, autoflush=False, bind=get_engine(url))()
    try:
        yield session
        session.commit()
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()
