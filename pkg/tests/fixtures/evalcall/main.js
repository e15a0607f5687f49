function target() {
  return 'hello';
}
function run() {
  eval('target()');
}
run();
