from types import SimpleNamespace

import pytest

from streamgate.engine import Engine
from streamgate.gateway import Gateway
from streamgate.policy import PolicyStore
from streamgate.querygraph import GPS, WEATHER

LTA_OBLIGATIONS = """\
 <Obligations>
    <Obligation ObligationId="exacml:obligation:stream-filter" FulfillOn="Permit">
      <AttributeAssignment AttributeId="pCloud:obligation:stream-filter-condition-id"
      DataType="http://www.w3.org/2001/XMLSchema#string">rainrate > 5 </AttributeAssignment>
    </Obligation>
    <Obligation ObligationId="exacml:obligation:stream-map" FulfillOn="Permit">
          <AttributeAssignment AttributeId="pCloud:obligation:stream-map-attribute-id"
          DataType="http://www.w3.org/2001/XMLSchema#string">samplingtime</AttributeAssignment>
          <AttributeAssignment AttributeId="pCloud:obligation:stream-map-attribute-id"
          DataType="http://www.w3.org/2001/XMLSchema#string">rainrate</AttributeAssignment>
          <AttributeAssignment AttributeId="pCloud:obligation:stream-map-attribute-id"
           DataType="http://www.w3.org/2001/XMLSchema#string">windspeed</AttributeAssignment>
    </Obligation>
    <Obligation ObligationId="exacml:obligation:stream-window" FulfillOn="Permit">
      <AttributeAssignment AttributeId="pCloud:obligation:stream-window-step-id"
      DataType="http://www.w3.org/2001/XMLSchema#integer">2</AttributeAssignment>
      <AttributeAssignment AttributeId="pCloud:obligation:stream-window-size-id"
      DataType="http://www.w3.org/2001/XMLSchema#integer">5</AttributeAssignment>
      <AttributeAssignment AttributeId="pCloud:obligation:stream-window-type-id"
      DataType="http://www.w3.org/2001/XMLSchema#string">tuple</AttributeAssignment>
      <AttributeAssignment AttributeId="pCloud:obligation:stream-window-attr-id"
      DataType="http://www.w3.org/2001/XMLSchema#string">samplingtime:lastval</AttributeAssignment>
      <AttributeAssignment AttributeId="pCloud:obligation:stream-window-attr-id"
      DataType="http://www.w3.org/2001/XMLSchema#string">rainrate:avg</AttributeAssignment>
      <AttributeAssignment AttributeId="pCloud:obligation:stream-window-attr-id"
      DataType="http://www.w3.org/2001/XMLSchema#string">windspeed:max</AttributeAssignment>
    </Obligation>
 </Obligations>
"""

LTA_POLICY = f"""\
<Policy PolicyId="lta-weather" Effect="Permit">
  <Target>
    <Subjects><Attribute AttributeId="organisation">LTA</Attribute></Subjects>
    <Resources><Attribute AttributeId="resource-id">weather</Attribute></Resources>
    <Actions><Attribute AttributeId="action-id">read</Attribute></Actions>
  </Target>
{LTA_OBLIGATIONS}</Policy>
"""

HEAVY_RAIN_QUERY = """\
<UserQuery>
   <Stream name="weather" />
   <Filter>
      <FilterCondition>
      RainRate > 50
      </FilterCondition>
   </Filter>
   <Map>
      <Attribute>RainRate</Attribute>
   </Map>
   <Aggregation>
      <WindowType>tuple</WindowType>
      <WindowSize>10<WindowSize>
      <WindowStep>2<WindowStep>
      <Attribute>avg(RainRate)</Attribute>
   </Aggregation>
</UserQuery>
"""

LTA = {"organisation": "LTA"}


def make_stack(**gateway_kw):
    engine = Engine()
    for schema in (WEATHER, GPS):
        engine.register_stream(schema)
    store = PolicyStore(engine.schema)
    gateway = Gateway(engine, store, **gateway_kw)
    return SimpleNamespace(engine=engine, store=store, gateway=gateway)


@pytest.fixture
def stack():
    return make_stack()


def weather_row(ts: int, rainrate: float, windspeed: float = 3.0) -> dict:
    return {"samplingtime": ts, "temperature": 28.0, "humidity": 80.0,
            "solarradiation": 400.0, "rainrate": rainrate, "windspeed": windspeed,
            "winddirection": 90, "barometer": 1008.0}


def policy_doc(policy_id: str, condition: str | None = None, subjects=LTA,
               resource: str = "weather", effect: str = "Permit") -> str:
    subj = "".join(f'<Attribute AttributeId="{k}">{v}</Attribute>' for k, v in subjects.items())
    obl = ""
    if condition is not None:
        cond = condition.replace("&", "&amp;").replace("<", "&lt;")
        obl = ('<Obligations><Obligation ObligationId="exacml:obligation:stream-filter" '
               'FulfillOn="Permit"><AttributeAssignment '
               'AttributeId="exacml:obligation:stream-filter-condition-id" '
               f'DataType="http://www.w3.org/2001/XMLSchema#string">{cond}'
               '</AttributeAssignment></Obligation></Obligations>')
    return (f'<Policy PolicyId="{policy_id}" Effect="{effect}"><Target>'
            f'<Subjects>{subj}</Subjects>'
            f'<Resources><Attribute AttributeId="resource-id">{resource}</Attribute></Resources>'
            '<Actions><Attribute AttributeId="action-id">read</Attribute></Actions>'
            f'</Target>{obl}</Policy>')


def user_query(stream: str = "weather", condition: str | None = None, map_attrs=(),
               window: tuple | None = None) -> str:
    parts = [f'<UserQuery><Stream name="{stream}" />']
    if condition is not None:
        cond = condition.replace("&", "&amp;").replace("<", "&lt;")
        parts.append(f"<Filter><FilterCondition>{cond}</FilterCondition></Filter>")
    if map_attrs:
        parts.append("<Map>" + "".join(f"<Attribute>{a}</Attribute>" for a in map_attrs)
                     + "</Map>")
    if window is not None:
        wtype, size, step, aggs = window
        parts.append(f"<Aggregation><WindowType>{wtype}</WindowType>"
                     f"<WindowSize>{size}</WindowSize><WindowStep>{step}</WindowStep>"
                     + "".join(f"<Attribute>{a}</Attribute>" for a in aggs)
                     + "</Aggregation>")
    parts.append("</UserQuery>")
    return "".join(parts)
